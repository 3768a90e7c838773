//! Bit-accurate MAC unit and systolic tile simulation.
//!
//! Each output element is produced by one PE that accumulates `a · w`
//! products into a two's-complement accumulator of `acc_bits` bits (24 by
//! default) in the order given by the reduction permutation. Every cycle
//! records the operands, the accumulator before and after, whether the sign
//! bit flipped, and the ripple depth of the highest toggled bit, which sets
//! the activated path delay. A sign flip always toggles the top bit, so it
//! always activates the full-length ripple.
//!
//! When the activated delay exceeds the clock period the PE latches a
//! corrupted value: bits that settled in time take the new sum, bits above
//! keep the old accumulator. The corruption carries into later cycles.

use serde::{Deserialize, Serialize};

use crate::dta::TimingEnv;
use crate::error::{Error, Result};
use crate::stream::SeededStream;
use crate::tensor::{QuantTensor, WideTensor};

pub const ACC_BITS: u32 = 24;

/// Sign-extend the low `bits` bits of `v` (two's-complement wrap).
pub fn wrap(v: i64, bits: u32) -> i32 {
    let shift = 64 - bits;
    ((v << shift) >> shift) as i32
}

pub fn wrap24(v: i64) -> i32 {
    wrap(v, ACC_BITS)
}

fn mask(bits: u32) -> u32 {
    if bits >= 32 {
        u32::MAX
    } else {
        (1u32 << bits) - 1
    }
}

fn sign_bit(v: i32, bits: u32) -> bool {
    (v as u32 >> (bits - 1)) & 1 == 1
}

/// Ripple depth of the highest accumulator bit that toggles.
pub fn chain_len(before: i32, after: i32, bits: u32) -> u32 {
    let toggled = (before ^ after) as u32 & mask(bits);
    32 - toggled.leading_zeros()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacState {
    pub acc: i32,
    pub cycle: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CycleEvent {
    pub cycle: u64,
    pub a: i8,
    pub w: i8,
    pub product: i16,
    pub acc_before: i32,
    /// Correct wrapped sum.
    pub acc_after: i32,
    /// Value actually latched; differs from `acc_after` only on a timing error.
    pub acc_latched: i32,
    pub sign_flip: bool,
    pub carry_chain_len: u32,
    /// ns; zero until priced by [`activated_delay`].
    pub activated_delay: f64,
    pub error: bool,
}

/// One MAC cycle on an accumulator of `bits` bits, with no timing model.
pub fn mac_step_bits(state: MacState, a: i8, w: i8, bits: u32) -> (MacState, CycleEvent) {
    let product = a as i16 * w as i16;
    let before = state.acc;
    let after = wrap(before as i64 + product as i64, bits);
    let ev = CycleEvent {
        cycle: state.cycle,
        a,
        w,
        product,
        acc_before: before,
        acc_after: after,
        acc_latched: after,
        sign_flip: sign_bit(before, bits) != sign_bit(after, bits),
        carry_chain_len: chain_len(before, after, bits),
        activated_delay: 0.0,
        error: false,
    };
    (
        MacState {
            acc: after,
            cycle: state.cycle + 1,
        },
        ev,
    )
}

pub fn mac_step(state: MacState, a: i8, w: i8) -> (MacState, CycleEvent) {
    mac_step_bits(state, a, w, ACC_BITS)
}

/// Path delay for a given chain length and variation factor.
pub fn path_delay(chain_len: u32, env: &TimingEnv, variation: f64) -> f64 {
    env.fresh_path_delay(chain_len) * env.aging_factor() * variation
}

/// Multiplicative variation of one cycle's path; exactly 1 when `rho` is 0.
pub fn variation_sample(chain_len: u32, env: &TimingEnv, stream: &mut SeededStream) -> f64 {
    if env.variation.rho == 0.0 {
        return 1.0;
    }
    let z = stream.next_normal();
    (1.0 + env.path_relative_sigma(chain_len) * z).max(0.0)
}

/// `(d_base + d_bit·L) · aging · variation`, drawing the variation from `stream`.
pub fn activated_delay(event: &CycleEvent, env: &TimingEnv, stream: &mut SeededStream) -> f64 {
    let v = variation_sample(event.carry_chain_len, env, stream);
    path_delay(event.carry_chain_len, env, v)
}

/// Number of low bits that settle within the clock period.
pub fn settled_bits(env: &TimingEnv, variation: f64) -> u32 {
    let scale = env.aging_factor() * variation;
    let budget = env.clock_period / scale - env.delay.d_base;
    if budget < 0.0 {
        return 0;
    }
    ((budget / env.delay.d_bit).floor() as u64).min(env.acc_bits as u64) as u32
}

/// Low `settled` bits from `after`, the rest from `before`, sign-extended.
pub fn stale_upper_bits(before: i32, after: i32, settled: u32, bits: u32) -> i32 {
    let low = mask(settled);
    let merged = (after as u32 & low) | (before as u32 & !low);
    wrap(merged as i64, bits)
}

/// Cycle and error counts for one tile run; merges associatively.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TerReport {
    pub total_cycles: u64,
    pub error_cycles: u64,
    pub sign_flip_cycles: u64,
    pub ter: f64,
    pub flip_rate: f64,
    pub output_elements: u64,
    /// Outputs with at least one error cycle.
    pub error_outputs: u64,
    /// Outputs with at least one sign flip.
    pub flip_outputs: u64,
    pub max_flips_per_output: u64,
}

impl TerReport {
    fn refresh(&mut self) {
        let n = self.total_cycles.max(1) as f64;
        self.ter = self.error_cycles as f64 / n;
        self.flip_rate = self.sign_flip_cycles as f64 / n;
        if self.total_cycles == 0 {
            self.ter = 0.0;
            self.flip_rate = 0.0;
        }
    }

    pub fn merge(&self, other: &TerReport) -> TerReport {
        let mut out = TerReport {
            total_cycles: self.total_cycles + other.total_cycles,
            error_cycles: self.error_cycles + other.error_cycles,
            sign_flip_cycles: self.sign_flip_cycles + other.sign_flip_cycles,
            ter: 0.0,
            flip_rate: 0.0,
            output_elements: self.output_elements + other.output_elements,
            error_outputs: self.error_outputs + other.error_outputs,
            flip_outputs: self.flip_outputs + other.flip_outputs,
            max_flips_per_output: self.max_flips_per_output.max(other.max_flips_per_output),
        };
        out.refresh();
        out
    }

    /// Fraction of output elements that saw at least one timing error.
    pub fn per_output_ter(&self) -> f64 {
        if self.output_elements == 0 {
            0.0
        } else {
            self.error_outputs as f64 / self.output_elements as f64
        }
    }
}

#[derive(Debug, Clone)]
pub struct TileRun {
    pub output: WideTensor,
    pub report: TerReport,
    pub events: Vec<CycleEvent>,
}

pub fn check_permutation(order: &[usize], n: usize) -> Result<()> {
    if order.len() != n {
        return Err(Error::invalid(format!(
            "order has {} entries, reduction axis has {n}",
            order.len()
        )));
    }
    let mut seen = vec![false; n];
    for &k in order {
        if k >= n || seen[k] {
            return Err(Error::invalid(format!("order is not a permutation of 0..{n}")));
        }
        seen[k] = true;
    }
    Ok(())
}

/// Simulates `weights [m × n] · acts [n × k]` with one PE per output.
///
/// Output `(i, j)` reduces over `order` and draws its variation from the
/// sub-stream keyed by `row_keys[i] · k + j`, so a row keeps its variation
/// draws when it is simulated inside a different row subset.
pub fn run_tile_keyed(
    weights: &QuantTensor,
    acts: &QuantTensor,
    env: &TimingEnv,
    order: &[usize],
    row_keys: &[usize],
    record_events: bool,
) -> Result<TileRun> {
    let (m, n) = weights.shape2()?;
    let (n2, k) = acts.shape2()?;
    if n != n2 {
        return Err(Error::invalid(format!(
            "inner dimensions differ: weights {m}x{n}, activations {n2}x{k}"
        )));
    }
    if row_keys.len() != m {
        return Err(Error::invalid("row_keys must have one key per weight row"));
    }
    check_permutation(order, n)?;
    let bits = env.acc_bits;

    let mut out = vec![0i32; m * k];
    let mut report = TerReport::default();
    let mut events = Vec::new();
    if record_events {
        events.reserve(m * n * k);
    }
    let mut cycle = 0u64;
    for i in 0..m {
        let wrow = weights.row(i);
        for j in 0..k {
            let mut stream = SeededStream::with_stream(env.variation.seed, (row_keys[i] * k + j) as u64);
            let mut state = MacState { acc: 0, cycle };
            let mut flips = 0u64;
            let mut errors = 0u64;
            for &t in order {
                let (mut next, mut ev) = mac_step_bits(state, acts.at(t, j), wrow[t], bits);
                let variation = variation_sample(ev.carry_chain_len, env, &mut stream);
                ev.activated_delay = path_delay(ev.carry_chain_len, env, variation);
                if env.timing_errors && ev.activated_delay > env.clock_period {
                    ev.error = true;
                    ev.acc_latched = stale_upper_bits(ev.acc_before, ev.acc_after, settled_bits(env, variation), bits);
                    next.acc = ev.acc_latched;
                    errors += 1;
                }
                flips += ev.sign_flip as u64;
                if record_events {
                    events.push(ev);
                }
                state = next;
            }
            cycle = state.cycle;
            out[i * k + j] = state.acc;
            report.total_cycles += n as u64;
            report.error_cycles += errors;
            report.sign_flip_cycles += flips;
            report.output_elements += 1;
            report.error_outputs += (errors > 0) as u64;
            report.flip_outputs += (flips > 0) as u64;
            report.max_flips_per_output = report.max_flips_per_output.max(flips);
        }
    }
    report.refresh();
    Ok(TileRun {
        output: WideTensor::new(vec![m, k], out, weights.scale() * acts.scale())?,
        report,
        events,
    })
}

/// Simulates a tile and records every cycle event.
pub fn run_tile(weights: &QuantTensor, acts: &QuantTensor, env: &TimingEnv, order: &[usize]) -> Result<TileRun> {
    let rows = weights.shape2()?.0;
    let keys: Vec<usize> = (0..rows).collect();
    run_tile_keyed(weights, acts, env, order, &keys, true)
}

/// CSV event trace with a header row.
pub fn events_to_csv(events: &[CycleEvent]) -> String {
    let mut s = String::from("cycle,a,w,acc_before,acc_after,sign_flip,chain_len,delay,error\n");
    for e in events {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{:.6},{}\n",
            e.cycle,
            e.a,
            e.w,
            e.acc_before,
            e.acc_latched,
            e.sign_flip as u8,
            e.carry_chain_len,
            e.activated_delay,
            e.error as u8
        ));
    }
    s
}
