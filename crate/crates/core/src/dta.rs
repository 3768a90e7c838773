//! Workload-driven dynamic timing analysis.
//!
//! Timing sites are the accumulator's bit stages. A cycle whose highest
//! toggled bit is `L - 1` activates a path of one base stage (operand and
//! product drive) plus `L` ripple stages. Two flows price that path:
//!
//! * corner: fresh delay × (1 + aging guardband + variation guardband);
//! * avatar: each stage is aged from the workload's own toggle activity
//!   (first-order in ΔVth), then priced statistically as μ + 3σ with
//!   independent per-stage variation.
//!
//! Both are compared against the static worst case, the full 24-bit ripple
//! with the full guardband.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::macsim::{self, CycleEvent};
use crate::workload::Workload;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DelayModel {
    /// Base stage delay (operand/product drive), ns.
    pub d_base: f64,
    /// Per-bit ripple stage delay, ns.
    pub d_bit: f64,
}

impl Default for DelayModel {
    fn default() -> Self {
        Self {
            d_base: 0.2,
            d_bit: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgingParams {
    /// ΔVth prefactor, volts.
    pub k_stress: f64,
    /// Power-law time exponent.
    pub exponent: f64,
    /// Stress time, hours.
    pub age_time: f64,
    /// Delay sensitivity to ΔVth, per volt.
    pub sensitivity: f64,
}

impl Default for AgingParams {
    fn default() -> Self {
        Self {
            k_stress: 0.05,
            exponent: 0.2,
            age_time: 1.0e4,
            sensitivity: 0.15,
        }
    }
}

impl AgingParams {
    pub fn delta_vth(&self, duty: f64) -> f64 {
        self.k_stress * duty * self.age_time.powf(self.exponent)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VariationParams {
    /// Relative sigma per stage.
    pub rho: f64,
    pub seed: u64,
}

impl Default for VariationParams {
    fn default() -> Self {
        Self { rho: 0.01, seed: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Guardband {
    pub aging_gb: f64,
    pub var_gb: f64,
}

impl Default for Guardband {
    fn default() -> Self {
        Self {
            aging_gb: 0.15,
            var_gb: 0.05,
        }
    }
}

impl Guardband {
    /// Additive composition of the two guardbands.
    pub fn total(&self) -> f64 {
        self.aging_gb + self.var_gb
    }
}

/// Operating point and delay/aging/variation models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimingEnv {
    /// Clock period, ns.
    pub clock_period: f64,
    pub vdd_label: String,
    pub delay: DelayModel,
    pub aging: AgingParams,
    pub variation: VariationParams,
    pub guardband: Guardband,
    /// When false, cycles never latch a corrupted value.
    pub timing_errors: bool,
    pub acc_bits: u32,
}

impl Default for TimingEnv {
    fn default() -> Self {
        Self {
            clock_period: 1.3,
            vdd_label: "nominal".to_string(),
            delay: DelayModel::default(),
            aging: AgingParams::default(),
            variation: VariationParams::default(),
            guardband: Guardband::default(),
            timing_errors: true,
            acc_bits: macsim::ACC_BITS,
        }
    }
}

impl TimingEnv {
    /// Error-free environment: same models, timing errors switched off.
    pub fn error_free(&self) -> Self {
        Self {
            timing_errors: false,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("clock_period", self.clock_period),
            ("delay.d_base", self.delay.d_base),
            ("delay.d_bit", self.delay.d_bit),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        let non_negative = [
            ("aging.k_stress", self.aging.k_stress),
            ("aging.exponent", self.aging.exponent),
            ("aging.age_time", self.aging.age_time),
            ("aging.sensitivity", self.aging.sensitivity),
            ("guardband.aging_gb", self.guardband.aging_gb),
            ("guardband.var_gb", self.guardband.var_gb),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be non-negative, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.variation.rho) {
            return Err(Error::invalid(format!(
                "variation.rho must be in [0, 1), got {}",
                self.variation.rho
            )));
        }
        if !(2..=31).contains(&self.acc_bits) {
            return Err(Error::invalid(format!(
                "acc_bits must be in [2, 31], got {}",
                self.acc_bits
            )));
        }
        Ok(())
    }

    /// Aging factor under full stress duty, applied uniformly to every stage.
    pub fn aging_factor(&self) -> f64 {
        1.0 + self.aging.sensitivity * self.aging.delta_vth(1.0)
    }

    /// Fresh (unaged, nominal) delay of a path with `chain_len` ripple stages.
    pub fn fresh_path_delay(&self, chain_len: u32) -> f64 {
        self.delay.d_base + self.delay.d_bit * chain_len as f64
    }

    /// Relative sigma of a fresh path with `chain_len` ripple stages.
    pub fn path_relative_sigma(&self, chain_len: u32) -> f64 {
        let l = chain_len as f64;
        let rss = (self.delay.d_base.powi(2) + l * self.delay.d_bit.powi(2)).sqrt();
        self.variation.rho * rss / self.fresh_path_delay(chain_len)
    }
}

/// Per-site stress: one entry per accumulator bit stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgingState {
    pub toggle_rate: Vec<f64>,
    /// Threshold-voltage shift, volts.
    pub delta_vth: Vec<f64>,
}

impl AgingState {
    pub fn fresh(sites: usize) -> Self {
        Self {
            toggle_rate: vec![0.0; sites],
            delta_vth: vec![0.0; sites],
        }
    }

    pub fn max_delta_vth(&self) -> f64 {
        self.delta_vth.iter().cloned().fold(0.0, f64::max)
    }

    fn mean_delta_vth(&self) -> f64 {
        if self.delta_vth.is_empty() {
            0.0
        } else {
            self.delta_vth.iter().sum::<f64>() / self.delta_vth.len() as f64
        }
    }
}

/// Toggle rate of every accumulator bit over an error-free trace.
pub fn extract_toggle_rates(trace: &[CycleEvent], acc_bits: u32) -> Result<AgingState> {
    if trace.is_empty() {
        return Err(Error::invalid("toggle-rate extraction needs a non-empty trace"));
    }
    let mut counts = vec![0u64; acc_bits as usize];
    for ev in trace {
        let toggled = (ev.acc_before ^ ev.acc_after) as u32;
        for (b, count) in counts.iter_mut().enumerate() {
            *count += ((toggled >> b) & 1) as u64;
        }
    }
    let n = trace.len() as f64;
    Ok(AgingState {
        toggle_rate: counts.into_iter().map(|c| c as f64 / n).collect(),
        delta_vth: vec![0.0; acc_bits as usize],
    })
}

/// ΔVth per site from its toggle duty (power law in stress time).
pub fn apply_aging(state: &AgingState, env: &TimingEnv) -> AgingState {
    AgingState {
        toggle_rate: state.toggle_rate.clone(),
        delta_vth: state
            .toggle_rate
            .iter()
            .map(|&duty| env.aging.delta_vth(duty))
            .collect(),
    }
}

/// First-order aged delay: `fresh · (1 + S·ΔVth)`.
pub fn aged_delay(fresh: f64, delta_vth: f64, env: &TimingEnv) -> f64 {
    fresh * (1.0 + env.aging.sensitivity * delta_vth)
}

/// Aged stage delays of the path activated by a chain of `chain_len` bits.
///
/// The base stage carries the mean site stress; ripple stage `b` carries
/// site `b`'s stress.
pub fn path_stages(chain_len: u32, aging: &AgingState, env: &TimingEnv) -> Vec<f64> {
    let mut stages = Vec::with_capacity(chain_len as usize + 1);
    stages.push(aged_delay(env.delay.d_base, aging.mean_delta_vth(), env));
    for b in 0..chain_len as usize {
        let dv = aging.delta_vth.get(b).copied().unwrap_or(0.0);
        stages.push(aged_delay(env.delay.d_bit, dv, env));
    }
    stages
}

/// `(μ, σ)` of a path: stage means add, independent stage sigmas add in RSS.
pub fn statistical_delay(stages: &[f64], env: &TimingEnv) -> Result<(f64, f64)> {
    if stages.is_empty() {
        return Err(Error::invalid("statistical delay needs at least one stage"));
    }
    let mu = stages.iter().sum();
    let sigma = stages
        .iter()
        .map(|s| (env.variation.rho * s).powi(2))
        .sum::<f64>()
        .sqrt();
    Ok((mu, sigma))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Corner,
    Avatar,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Corner => "corner",
            Method::Avatar => "avatar",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FmaxResult {
    pub method: Method,
    /// MHz, from a clock period in ns.
    pub fmax: f64,
    pub period_ns: f64,
    pub improvement_vs_sta: f64,
    /// Longest activated chain observed in the workload.
    pub max_chain_len: u32,
}

/// Static worst-case period: the full ripple chain with the full guardband.
pub fn sta_period(env: &TimingEnv) -> f64 {
    env.fresh_path_delay(env.acc_bits) * (1.0 + env.guardband.total())
}

/// Required period of a cycle with the given chain length.
pub fn required_period(chain_len: u32, method: Method, aging: &AgingState, env: &TimingEnv) -> Result<f64> {
    match method {
        Method::Corner => Ok(env.fresh_path_delay(chain_len) * (1.0 + env.guardband.total())),
        Method::Avatar => {
            let (mu, sigma) = statistical_delay(&path_stages(chain_len, aging, env), env)?;
            Ok(mu + 3.0 * sigma)
        }
    }
}

/// Smallest candidate period that every cycle meets.
///
/// The feasible set `{T : all cycles meet T}` is upward closed, so the
/// search bisects over the sorted distinct per-cycle requirements and
/// returns the binding one exactly.
pub fn search_period(required: &[f64]) -> Result<f64> {
    let mut cands: Vec<f64> = required.iter().copied().filter(|d| d.is_finite()).collect();
    if cands.len() != required.len() {
        return Err(Error::Internal("non-finite cycle delay in period search".into()));
    }
    cands.sort_by(f64::total_cmp);
    cands.dedup();
    if cands.last().is_none_or(|&d| d <= 0.0) {
        return Err(Error::Internal(
            "period search cannot converge: every cycle has zero delay".into(),
        ));
    }
    let meets = |t: f64| required.iter().all(|&d| d <= t);
    let (mut lo, mut hi) = (0usize, cands.len() - 1);
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if meets(cands[mid]) {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    Ok(cands[lo])
}

/// Toggle activity and chain lengths of one workload, computed once and
/// shared by both pricing methods.
#[derive(Debug, Clone)]
pub struct WorkloadProfile {
    pub chain_lens: Vec<u32>,
    pub aging: AgingState,
}

impl WorkloadProfile {
    /// Runs the workload error-free and ages every site from its own activity.
    pub fn measure(workload: &Workload, env: &TimingEnv) -> Result<Self> {
        let run = macsim::run_tile(
            &workload.weights,
            &workload.acts,
            &env.error_free(),
            &workload.order_or_identity()?,
        )?;
        let toggles = extract_toggle_rates(&run.events, env.acc_bits)?;
        Ok(Self {
            chain_lens: run.events.iter().map(|e| e.carry_chain_len).collect(),
            aging: apply_aging(&toggles, env),
        })
    }

    pub fn max_chain_len(&self) -> u32 {
        self.chain_lens.iter().copied().max().unwrap_or(0)
    }

    /// Whether aging plus 3σ stays inside the corner guardband on every
    /// activated path, the condition under which avatar dominates corner.
    pub fn within_guardband(&self, env: &TimingEnv) -> bool {
        let n_stage = (self.max_chain_len() + 1) as f64;
        env.aging.sensitivity * self.aging.max_delta_vth() + 3.0 * env.variation.rho * n_stage.sqrt()
            < env.guardband.total()
    }

    pub fn fmax(&self, method: Method, env: &TimingEnv) -> Result<FmaxResult> {
        fmax_from_chains(&self.chain_lens, &self.aging, method, env)
    }
}

/// Application-specific fmax of a set of activated chains under fixed aging.
pub fn fmax_from_chains(chain_lens: &[u32], aging: &AgingState, method: Method, env: &TimingEnv) -> Result<FmaxResult> {
    if chain_lens.is_empty() {
        return Err(Error::invalid("fmax search needs at least one cycle"));
    }
    let max_len = chain_lens.iter().copied().max().unwrap_or(0);
    // Per-cycle requirement only depends on the chain length.
    let mut by_len = vec![None; env.acc_bits as usize + 1];
    let mut required = Vec::with_capacity(chain_lens.len());
    for &l in chain_lens {
        let slot = by_len
            .get_mut(l as usize)
            .ok_or_else(|| Error::invalid(format!("chain length {l} exceeds accumulator width")))?;
        if slot.is_none() {
            *slot = Some(required_period(l, method, aging, env)?);
        }
        required.push(slot.unwrap());
    }
    let period = search_period(&required)?;
    let sta = sta_period(env);
    Ok(FmaxResult {
        method,
        fmax: 1000.0 / period,
        period_ns: period,
        improvement_vs_sta: sta / period - 1.0,
        max_chain_len: max_len,
    })
}

/// Profile the workload under `env` and report its fmax for `method`.
pub fn fmax_search(workload: &Workload, method: Method, env: &TimingEnv) -> Result<FmaxResult> {
    env.validate()?;
    WorkloadProfile::measure(workload, env)?.fmax(method, env)
}
