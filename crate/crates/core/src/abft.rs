//! Statistical algorithm-based fault tolerance.
//!
//! Checksums follow the classic ones-vector identity `eᵀ(WX) = (eᵀW)X`,
//! evaluated in exact integers on the wide (pre-requantization) outputs.
//! Both systolic dataflows are modelled with their own datapath order:
//!
//! * weight stationary: a PE column holds `eᵀW` while activations stream
//!   through it; an adder row under the array sums each output column.
//! * output stationary: an adder column folds each weight column into
//!   `eᵀW` step by step, and a PE row under the array accumulates the
//!   checksum products in place.
//!
//! A statistical unit summarises the per-column mismatches of a tile as
//! (frequency, magnitude). Recomputation happens only when that point lies
//! above the tile's critical-region boundary.

use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inject::{self, degradation, Degradation, GemmHook, InjectionSpec, Linear, Site, Stage, ToyNetwork};
use crate::stream::SeededStream;
use crate::tensor::{gemm, QuantTensor, WideTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dataflow {
    WeightStationary,
    OutputStationary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChecksumPlan {
    pub dataflow: Dataflow,
    /// Output rows per tile.
    pub rows: usize,
    /// Output columns per tile.
    pub cols: usize,
    /// Reduction depth of the array; longer reductions take several passes.
    pub depth: usize,
    /// Wide-accumulator units per output quantum; mismatch magnitudes are
    /// divided by this before they reach the statistical unit.
    #[serde(default = "one")]
    pub mag_unit: f64,
}

fn one() -> f64 {
    1.0
}

impl ChecksumPlan {
    pub fn new(dataflow: Dataflow, rows: usize, cols: usize, depth: usize) -> Self {
        Self {
            dataflow,
            rows,
            cols,
            depth,
            mag_unit: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 || self.depth == 0 {
            return Err(Error::invalid("checksum plan tile dims must be positive"));
        }
        if !(self.mag_unit > 0.0 && self.mag_unit.is_finite()) {
            return Err(Error::invalid("checksum plan mag_unit must be positive"));
        }
        Ok(())
    }

    /// Array passes needed for a reduction of length `n`.
    pub fn passes(&self, n: usize) -> usize {
        n.div_ceil(self.depth).max(1)
    }
}

/// Error statistics of one tile (or a merge of tiles).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    /// Fraction of columns with a nonzero mismatch.
    pub freq: f64,
    /// Largest |mismatch|, in output quanta.
    pub max_mag: f64,
    /// Sum of |mismatch|, in output quanta.
    pub total_mag: f64,
    /// Checksum minus observed column sum, wide units.
    pub mismatches: Vec<i64>,
    /// The checksum row disagrees with the independent grand total, so the
    /// checksum hardware itself is suspect.
    pub checksum_fault: bool,
    mag_unit: f64,
}

impl ErrorStats {
    pub fn from_mismatches(mismatches: Vec<i64>, mag_unit: f64, checksum_fault: bool) -> Self {
        let cols = mismatches.len().max(1) as f64;
        let bad = mismatches.iter().filter(|&&m| m != 0).count();
        let max = mismatches.iter().map(|m| m.unsigned_abs()).max().unwrap_or(0);
        let total: u128 = mismatches.iter().map(|m| m.unsigned_abs() as u128).sum();
        Self {
            freq: if mismatches.is_empty() { 0.0 } else { bad as f64 / cols },
            max_mag: max as f64 / mag_unit,
            total_mag: total as f64 / mag_unit,
            mismatches,
            checksum_fault,
            mag_unit,
        }
    }

    pub fn is_clean(&self) -> bool {
        self.freq == 0.0 && !self.checksum_fault
    }

    /// Statistics over the union of both tiles' columns.
    pub fn merge(&self, other: &ErrorStats) -> ErrorStats {
        let mut m = self.mismatches.clone();
        m.extend_from_slice(&other.mismatches);
        ErrorStats::from_mismatches(m, self.mag_unit, self.checksum_fault || other.checksum_fault)
    }
}

/// A fault added to one checksum-row PE, for exercising the consistency check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChecksumFault {
    pub col: usize,
    pub delta: i64,
}

fn check_shapes(w: &QuantTensor, x: &QuantTensor, y: &WideTensor) -> Result<(usize, usize, usize)> {
    let (m, n) = w.shape2()?;
    let (n2, k) = x.shape2()?;
    let (ym, yk) = y.shape2()?;
    if n != n2 || ym != m || yk != k {
        return Err(Error::invalid(format!(
            "checksum shapes do not conform: W {m}x{n}, X {n2}x{k}, Y {ym}x{yk}"
        )));
    }
    Ok((m, n, k))
}

/// Weight-stationary checksum: precompute `eᵀW` in the extra PE column,
/// then stream each activation column through it.
pub fn checksum_ws_with(
    w: &QuantTensor,
    x: &QuantTensor,
    y: &WideTensor,
    mag_unit: f64,
    fault: Option<ChecksumFault>,
) -> Result<ErrorStats> {
    let (m, n, k) = check_shapes(w, x, y)?;
    let mut wsum = vec![0i64; n];
    for i in 0..m {
        for (t, &v) in w.row(i).iter().enumerate() {
            wsum[t] += v as i64;
        }
    }
    let mut check_row = vec![0i64; k];
    for (j, cs) in check_row.iter_mut().enumerate() {
        *cs = (0..n).map(|t| wsum[t] * x.at(t, j) as i64).sum();
    }
    // adder row below the array
    let mut out_row = vec![0i64; k];
    for i in 0..m {
        for (j, acc) in out_row.iter_mut().enumerate() {
            *acc += y.at(i, j) as i64;
        }
    }
    if let Some(f) = fault {
        inject_checksum_fault(&mut check_row, f)?;
    }
    let grand: i64 = (0..n)
        .map(|t| wsum[t] * (0..k).map(|j| x.at(t, j) as i64).sum::<i64>())
        .sum();
    Ok(assemble(&check_row, &out_row, grand, mag_unit))
}

/// Output-stationary checksum: at reduction step `t` the adder column folds
/// weight column `t` into a scalar and every checksum PE accumulates its
/// product with activation row `t`.
pub fn checksum_os_with(
    w: &QuantTensor,
    x: &QuantTensor,
    y: &WideTensor,
    mag_unit: f64,
    fault: Option<ChecksumFault>,
) -> Result<ErrorStats> {
    let (m, n, k) = check_shapes(w, x, y)?;
    let mut check_row = vec![0i64; k];
    let mut grand = 0i64;
    for t in 0..n {
        let col_sum: i64 = (0..m).map(|i| w.at(i, t) as i64).sum();
        for (j, pe) in check_row.iter_mut().enumerate() {
            let a = x.at(t, j) as i64;
            *pe += col_sum * a;
            grand += col_sum * a;
        }
    }
    // outputs drain column by column
    let out_row: Vec<i64> = (0..k).map(|j| (0..m).map(|i| y.at(i, j) as i64).sum()).collect();
    if let Some(f) = fault {
        inject_checksum_fault(&mut check_row, f)?;
    }
    Ok(assemble(&check_row, &out_row, grand, mag_unit))
}

fn inject_checksum_fault(row: &mut [i64], f: ChecksumFault) -> Result<()> {
    let slot = row
        .get_mut(f.col)
        .ok_or_else(|| Error::invalid(format!("checksum fault column {} out of range", f.col)))?;
    *slot += f.delta;
    Ok(())
}

fn assemble(check_row: &[i64], out_row: &[i64], grand: i64, mag_unit: f64) -> ErrorStats {
    let mismatches = check_row.iter().zip(out_row).map(|(c, o)| c - o).collect();
    let checksum_fault = check_row.iter().sum::<i64>() != grand;
    ErrorStats::from_mismatches(mismatches, mag_unit, checksum_fault)
}

pub fn checksum_ws(w: &QuantTensor, x: &QuantTensor, y: &WideTensor) -> Result<ErrorStats> {
    checksum_ws_with(w, x, y, 1.0, None)
}

pub fn checksum_os(w: &QuantTensor, x: &QuantTensor, y: &WideTensor) -> Result<ErrorStats> {
    checksum_os_with(w, x, y, 1.0, None)
}

impl ChecksumPlan {
    pub fn verify(&self, w: &QuantTensor, x: &QuantTensor, y: &WideTensor) -> Result<ErrorStats> {
        match self.dataflow {
            Dataflow::WeightStationary => checksum_ws_with(w, x, y, self.mag_unit, None),
            Dataflow::OutputStationary => checksum_os_with(w, x, y, self.mag_unit, None),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Knot {
    pub f: f64,
    pub m: f64,
}

/// Non-increasing boundary `m*(f)`; points strictly above it are critical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CriticalRegion {
    pub knots: Vec<Knot>,
    pub degradation_threshold: f64,
}

impl CriticalRegion {
    pub fn new(knots: Vec<Knot>, degradation_threshold: f64) -> Result<Self> {
        let r = Self {
            knots,
            degradation_threshold,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if self.knots.is_empty() {
            return Err(Error::invalid("critical region needs at least one knot"));
        }
        for w in self.knots.windows(2) {
            if w[1].f <= w[0].f {
                return Err(Error::invalid("critical region knots must have increasing f"));
            }
            if w[1].m > w[0].m {
                return Err(Error::invalid("critical region boundary must be non-increasing"));
            }
        }
        if self.knots.iter().any(|k| k.m.is_nan() || k.m < 0.0 || !k.f.is_finite()) {
            return Err(Error::invalid("critical region boundary must be non-negative"));
        }
        Ok(())
    }

    /// Boundary magnitude at frequency `f` (linear between knots, flat outside).
    pub fn boundary(&self, f: f64) -> f64 {
        let first = self.knots[0];
        let last = self.knots[self.knots.len() - 1];
        if f <= first.f {
            return first.m;
        }
        if f >= last.f {
            return last.m;
        }
        for w in self.knots.windows(2) {
            if f <= w[1].f {
                let t = (f - w[0].f) / (w[1].f - w[0].f);
                return w[0].m + t * (w[1].m - w[0].m);
            }
        }
        last.m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Keep,
    Recompute,
}

/// Recompute iff the largest mismatch lies strictly above the boundary.
pub fn classify(stats: &ErrorStats, region: &CriticalRegion) -> Decision {
    if stats.max_mag > region.boundary(stats.freq) {
        Decision::Recompute
    } else {
        Decision::Keep
    }
}

/// An additive fault on one wide output element.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fault {
    pub row: usize,
    pub col: usize,
    pub delta: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultModel {
    None,
    Explicit(Vec<Fault>),
    Injection(InjectionSpec),
}

impl FaultModel {
    /// Apply the faults to a full output tensor. Injection magnitudes are in
    /// output quanta of `mag_unit` wide units each.
    pub fn apply(&self, y: &WideTensor, mag_unit: f64) -> Result<WideTensor> {
        match self {
            FaultModel::None => Ok(y.clone()),
            FaultModel::Explicit(faults) => {
                let (m, k) = y.shape2()?;
                let mut out = y.clone();
                for f in faults {
                    if f.row >= m || f.col >= k {
                        return Err(Error::invalid(format!(
                            "fault at ({}, {}) outside {m}x{k} output",
                            f.row, f.col
                        )));
                    }
                    let v = (out.at(f.row, f.col) as i64 + f.delta).clamp(i32::MIN as i64, i32::MAX as i64);
                    out.set(f.row, f.col, v as i32);
                }
                Ok(out)
            }
            FaultModel::Injection(spec) => inject::inject_scaled(y, spec, mag_unit, 0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtectOptions {
    pub max_rounds: usize,
    /// Faults recur on recomputation (permanent fault); default transient.
    pub persistent: bool,
}

impl Default for ProtectOptions {
    fn default() -> Self {
        Self {
            max_rounds: 3,
            persistent: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileAudit {
    pub tile_id: usize,
    pub row_start: usize,
    pub col_start: usize,
    /// Statistics observed on the first pass.
    pub stats: ErrorStats,
    pub decision: Decision,
    pub recompute_count: usize,
}

#[derive(Debug, Clone)]
pub struct ProtectedGemm {
    pub y: WideTensor,
    pub audit: Vec<TileAudit>,
}

impl ProtectedGemm {
    pub fn recompute_count(&self) -> usize {
        self.audit.iter().map(|a| a.recompute_count).sum()
    }

    pub fn decision(&self) -> Decision {
        if self.audit.iter().any(|a| a.decision == Decision::Recompute) {
            Decision::Recompute
        } else {
            Decision::Keep
        }
    }

    /// Stats merged over every tile's first pass.
    pub fn stats(&self) -> Option<ErrorStats> {
        self.audit.iter().map(|a| a.stats.clone()).reduce(|a, b| a.merge(&b))
    }

    /// One JSON object per tile.
    pub fn audit_jsonl(&self) -> String {
        let mut s = String::new();
        for a in &self.audit {
            s.push_str(&serde_json::to_string(a).expect("audit records serialize"));
            s.push('\n');
        }
        s
    }
}

fn sub_block(t: &WideTensor, r0: usize, r1: usize, c0: usize, c1: usize) -> Result<WideTensor> {
    let mut data = Vec::with_capacity((r1 - r0) * (c1 - c0));
    for r in r0..r1 {
        for c in c0..c1 {
            data.push(t.at(r, c));
        }
    }
    WideTensor::new(vec![r1 - r0, c1 - c0], data, t.scale())
}

fn col_block(x: &QuantTensor, c0: usize, c1: usize) -> Result<QuantTensor> {
    let (n, _) = x.shape2()?;
    let mut data = Vec::with_capacity(n * (c1 - c0));
    for t in 0..n {
        for c in c0..c1 {
            data.push(x.at(t, c));
        }
    }
    QuantTensor::new(vec![n, c1 - c0], data, x.scale())
}

/// GEMM under a fault model, verified tile by tile.
///
/// Each tile is checked by the plan's checksum; tiles whose statistics fall
/// in the critical region are recomputed and re-verified up to
/// `opts.max_rounds` times.
pub fn protected_gemm(
    w: &QuantTensor,
    x: &QuantTensor,
    plan: &ChecksumPlan,
    region: &CriticalRegion,
    faults: &FaultModel,
    opts: ProtectOptions,
) -> Result<ProtectedGemm> {
    plan.validate()?;
    region.validate()?;
    let (m, _) = w.shape2()?;
    let (_, k) = x.shape2()?;
    let exact = gemm(w, x)?;
    let faulty = faults.apply(&exact, plan.mag_unit)?;
    let mut y = faulty.clone();
    let mut audit = Vec::new();
    let mut tile_id = 0;
    for r0 in (0..m).step_by(plan.rows) {
        let r1 = (r0 + plan.rows).min(m);
        let rows: Vec<usize> = (r0..r1).collect();
        let wt = w.select_rows(&rows)?;
        for c0 in (0..k).step_by(plan.cols) {
            let c1 = (c0 + plan.cols).min(k);
            let xt = col_block(x, c0, c1)?;
            let first = plan.verify(&wt, &xt, &sub_block(&faulty, r0, r1, c0, c1)?)?;
            let decision = classify(&first, region);
            let mut rounds = 0;
            if decision == Decision::Recompute {
                let mut stats = first.clone();
                loop {
                    if rounds == opts.max_rounds {
                        return Err(Error::UnrecoverableFault {
                            tile_id,
                            rounds,
                            stats: Box::new(stats),
                        });
                    }
                    rounds += 1;
                    let redo = if opts.persistent {
                        sub_block(&faulty, r0, r1, c0, c1)?
                    } else {
                        sub_block(&exact, r0, r1, c0, c1)?
                    };
                    stats = plan.verify(&wt, &xt, &redo)?;
                    if classify(&stats, region) == Decision::Keep {
                        for r in r0..r1 {
                            for c in c0..c1 {
                                y.set(r, c, redo.at(r - r0, c - c0));
                            }
                        }
                        break;
                    }
                }
            }
            audit.push(TileAudit {
                tile_id,
                row_start: r0,
                col_start: c0,
                stats: first,
                decision,
                recompute_count: rounds,
            });
            tile_id += 1;
        }
    }
    Ok(ProtectedGemm { y, audit })
}

/// Sweep grid for region calibration, both axes ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationGrid {
    pub freqs: Vec<f64>,
    /// Magnitudes in output quanta.
    pub mags: Vec<f64>,
}

impl CalibrationGrid {
    pub fn validate(&self) -> Result<()> {
        for (name, axis) in [("freqs", &self.freqs), ("mags", &self.mags)] {
            if axis.len() < 3 {
                return Err(Error::invalid(format!("calibration grid needs at least 3 {name}")));
            }
            if axis.windows(2).any(|w| w[1] <= w[0]) || axis[0] < 0.0 {
                return Err(Error::invalid(format!(
                    "calibration {name} must be non-negative and ascending"
                )));
            }
        }
        if self.freqs.iter().any(|&f| f > 1.0) {
            return Err(Error::invalid("calibration freqs must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Measured degradation surface and the boundary derived from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub region: CriticalRegion,
    /// `degradation[i][j]` at `(freqs[i], mags[j])`.
    pub degradation: Vec<Vec<f64>>,
}

/// Derive a critical region from a degradation measurement over the grid.
///
/// A magnitude is acceptable while its degradation stays strictly below the
/// threshold. At each frequency the boundary is interpolated linearly
/// between the last acceptable and the first unacceptable magnitude; when
/// even the smallest magnitude is unacceptable the boundary is 0. A
/// running minimum makes the boundary non-increasing in frequency.
pub fn calibrate_region(
    grid: &CalibrationGrid,
    threshold: f64,
    mut measure: impl FnMut(f64, f64) -> Result<f64>,
) -> Result<Calibration> {
    grid.validate()?;
    if threshold.is_nan() || threshold < 0.0 {
        return Err(Error::invalid("degradation threshold must be non-negative"));
    }
    let mut degradation = Vec::with_capacity(grid.freqs.len());
    let mut knots = Vec::with_capacity(grid.freqs.len());
    let mut running = f64::INFINITY;
    for &f in &grid.freqs {
        let row: Vec<f64> = grid.mags.iter().map(|&m| measure(f, m)).collect::<Result<_>>()?;
        let mut boundary = *grid.mags.last().unwrap();
        for (j, &d) in row.iter().enumerate() {
            if d >= threshold {
                boundary = if j == 0 {
                    0.0
                } else {
                    let (m0, m1) = (grid.mags[j - 1], grid.mags[j]);
                    let d0 = row[j - 1];
                    let t = if d > d0 { (threshold - d0) / (d - d0) } else { 0.0 };
                    m0 + t.clamp(0.0, 1.0) * (m1 - m0)
                };
                break;
            }
        }
        running = running.min(boundary);
        knots.push(Knot { f, m: running });
        degradation.push(row);
    }
    Ok(Calibration {
        region: CriticalRegion::new(knots, threshold)?,
        degradation,
    })
}

/// Calibrate the critical region of one network site from tile-pattern
/// injections at every grid point.
#[allow(clippy::too_many_arguments)]
pub fn calibrate_site(
    net: &ToyNetwork,
    site: Site,
    stage: Stage,
    plan: &ChecksumPlan,
    grid: &CalibrationGrid,
    threshold: f64,
    trials: usize,
    seed: u64,
) -> Result<Calibration> {
    plan.validate()?;
    net.linear(site)?;
    calibrate_region(grid, threshold, |f, m| {
        Ok(inject::tile_pattern_degradation(net, site, stage, (plan.rows, plan.cols), f, m, trials, seed)?.distortion)
    })
}

/// A mix of tolerable and critical tile faults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SoupSpec {
    /// Probability that a tile gets the small pattern rather than a large fault.
    pub small_fraction: f64,
    /// Column frequency of the small pattern within its tile.
    pub small_freq: f64,
    /// Small magnitude as a fraction of the boundary at `small_freq`.
    pub small_scale: f64,
    /// Large fault magnitude as a multiple of the largest boundary magnitude.
    pub large_scale: f64,
    pub seed: u64,
}

impl SoupSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("small_fraction", self.small_fraction), ("small_freq", self.small_freq)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("{name} must be in [0, 1], got {v}")));
            }
        }
        if !(self.small_scale >= 0.0 && self.large_scale > 1.0) {
            return Err(Error::invalid("small_scale must be >= 0 and large_scale > 1"));
        }
        Ok(())
    }
}

/// Explicit faults for every tile of a `rows × cols` output, in wide units.
pub fn fault_soup(
    rows: usize,
    cols: usize,
    plan: &ChecksumPlan,
    region: &CriticalRegion,
    soup: &SoupSpec,
) -> Result<Vec<Fault>> {
    plan.validate()?;
    region.validate()?;
    soup.validate()?;
    let mut s = SeededStream::new(soup.seed);
    let max_boundary = region.knots.iter().map(|k| k.m).fold(0.0, f64::max);
    let signed = |s: &mut SeededStream, mag: f64| {
        let d = (mag * plan.mag_unit).round() as i64;
        if s.next_bool(0.5) {
            d
        } else {
            -d
        }
    };
    let mut faults = Vec::new();
    for r0 in (0..rows).step_by(plan.rows) {
        let r1 = (r0 + plan.rows).min(rows);
        for c0 in (0..cols).step_by(plan.cols) {
            let c1 = (c0 + plan.cols).min(cols);
            let width = c1 - c0;
            if s.next_bool(soup.small_fraction) {
                let count = (soup.small_freq * width as f64).round() as usize;
                let mag = soup.small_scale * region.boundary(count as f64 / width as f64);
                for c in s.sample_indices(width, count) {
                    let row = r0 + s.next_index(r1 - r0);
                    let delta = signed(&mut s, mag);
                    faults.push(Fault {
                        row,
                        col: c0 + c,
                        delta,
                    });
                }
            } else {
                let row = r0 + s.next_index(r1 - r0);
                let col = c0 + s.next_index(width);
                let delta = signed(&mut s, soup.large_scale * max_boundary.max(1.0));
                faults.push(Fault { row, col, delta });
            }
        }
    }
    Ok(faults)
}

/// The plan with its magnitude unit set to the site's output quantum.
pub fn site_plan(net: &ToyNetwork, site: Site, plan: &ChecksumPlan) -> Result<ChecksumPlan> {
    let mut p = plan.clone();
    p.mag_unit = net.linear(site)?.mag_unit();
    p.validate()?;
    Ok(p)
}

/// Runs one network site as a protected GEMM and keeps its audits.
pub struct ProtectedSite<'a> {
    pub site: Site,
    pub plan: ChecksumPlan,
    pub region: &'a CriticalRegion,
    pub faults: &'a FaultModel,
    pub opts: ProtectOptions,
    runs: Mutex<Vec<ProtectedGemm>>,
}

impl<'a> ProtectedSite<'a> {
    pub fn new(
        site: Site,
        plan: ChecksumPlan,
        region: &'a CriticalRegion,
        faults: &'a FaultModel,
        opts: ProtectOptions,
    ) -> Self {
        Self {
            site,
            plan,
            region,
            faults,
            opts,
            runs: Mutex::new(Vec::new()),
        }
    }

    pub fn into_runs(self) -> Vec<ProtectedGemm> {
        self.runs.into_inner().unwrap_or_else(|e| e.into_inner())
    }
}

impl GemmHook for ProtectedSite<'_> {
    fn apply(&self, site: Site, linear: &Linear, x: &QuantTensor, exact: WideTensor) -> Result<WideTensor> {
        let same = site.component == self.site.component
            && (site.component == inject::Component::Other || site.layer == self.site.layer);
        if !same {
            return Ok(exact);
        }
        let mut plan = self.plan.clone();
        plan.mag_unit = linear.mag_unit();
        let run = protected_gemm(&linear.w, x, &plan, self.region, self.faults, self.opts)?;
        let y = run.y.clone();
        self.runs.lock().unwrap_or_else(|e| e.into_inner()).push(run);
        Ok(y)
    }
}

/// Outcome of a network forward pass with one protected site.
#[derive(Debug, Clone)]
pub struct ProtectedRun {
    pub degradation: Degradation,
    pub tiles: usize,
    /// Tiles whose first pass showed any mismatch.
    pub faulty_tiles: usize,
    pub recomputed_tiles: usize,
    /// Recomputed share of faulty tiles; always-correct ABFT scores 1.
    pub recompute_rate: f64,
    /// Faulty tiles kept uncorrected, as a share of faulty tiles.
    pub missed_rate: f64,
    pub runs: Vec<ProtectedGemm>,
}

pub fn run_protected(
    net: &ToyNetwork,
    site: Site,
    stage: Stage,
    plan: &ChecksumPlan,
    region: &CriticalRegion,
    faults: &FaultModel,
    opts: ProtectOptions,
) -> Result<ProtectedRun> {
    let hook = ProtectedSite::new(site, site_plan(net, site, plan)?, region, faults, opts);
    let out = net.forward(stage, &hook)?;
    Ok(ProtectedRun::summarize(
        degradation(&out, net.reference(stage)),
        hook.into_runs(),
    ))
}

impl ProtectedRun {
    /// Tile counts and rates over the audits of `runs`.
    pub fn summarize(degradation: Degradation, runs: Vec<ProtectedGemm>) -> Self {
        let (mut tiles, mut faulty, mut recomputed) = (0, 0, 0);
        for a in runs.iter().flat_map(|r| r.audit.iter()) {
            tiles += 1;
            if !a.stats.is_clean() {
                faulty += 1;
            }
            if a.decision == Decision::Recompute {
                recomputed += 1;
            }
        }
        let share = |n: usize| if faulty == 0 { 0.0 } else { n as f64 / faulty as f64 };
        ProtectedRun {
            degradation,
            tiles,
            faulty_tiles: faulty,
            recomputed_tiles: recomputed,
            recompute_rate: share(recomputed),
            missed_rate: share(faulty.saturating_sub(recomputed)),
            runs,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream::SeededStream;

    fn random_q(rows: usize, cols: usize, s: &mut SeededStream) -> QuantTensor {
        QuantTensor::from_fn(rows, cols, 1.0, |_, _| s.next_range_i64(-128, 127) as i8)
    }

    fn region(knots: &[(f64, f64)]) -> CriticalRegion {
        CriticalRegion::new(knots.iter().map(|&(f, m)| Knot { f, m }).collect(), 0.1).unwrap()
    }

    #[test]
    fn fault_free_is_clean() {
        let mut s = SeededStream::new(1);
        let w = random_q(5, 7, &mut s);
        let x = random_q(7, 4, &mut s);
        let y = gemm(&w, &x).unwrap();
        for st in [checksum_ws(&w, &x, &y).unwrap(), checksum_os(&w, &x, &y).unwrap()] {
            assert_eq!(st.freq, 0.0);
            assert_eq!(st.max_mag, 0.0);
            assert!(!st.checksum_fault);
        }
    }

    #[test]
    fn single_fault_mismatch_is_minus_delta() {
        let mut s = SeededStream::new(2);
        let w = random_q(4, 6, &mut s);
        let x = random_q(6, 5, &mut s);
        let mut y = gemm(&w, &x).unwrap();
        y.set(2, 3, y.at(2, 3) + 17);
        let st = checksum_ws(&w, &x, &y).unwrap();
        assert_eq!(st.mismatches, vec![0, 0, 0, -17, 0]);
        assert_eq!(st.freq, 1.0 / 5.0);
        assert_eq!(st.max_mag, 17.0);
        assert!(!st.checksum_fault);
    }

    #[test]
    fn opposite_faults_in_one_column_alias() {
        let mut s = SeededStream::new(3);
        let w = random_q(4, 6, &mut s);
        let x = random_q(6, 5, &mut s);
        let mut y = gemm(&w, &x).unwrap();
        y.set(0, 1, y.at(0, 1) + 9);
        y.set(3, 1, y.at(3, 1) - 9);
        assert_eq!(checksum_ws(&w, &x, &y).unwrap().freq, 0.0);
    }

    #[test]
    fn checksum_row_fault_is_flagged() {
        let mut s = SeededStream::new(4);
        let w = random_q(4, 6, &mut s);
        let x = random_q(6, 5, &mut s);
        let y = gemm(&w, &x).unwrap();
        let f = Some(ChecksumFault { col: 2, delta: 40 });
        for st in [
            checksum_ws_with(&w, &x, &y, 1.0, f).unwrap(),
            checksum_os_with(&w, &x, &y, 1.0, f).unwrap(),
        ] {
            assert!(st.checksum_fault);
            assert_eq!(st.mismatches[2], 40);
        }
        // an output fault of the same size is not flagged
        let mut yf = y.clone();
        yf.set(1, 2, yf.at(1, 2) - 40);
        assert!(!checksum_os(&w, &x, &yf).unwrap().checksum_fault);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let w = QuantTensor::zeros(vec![2, 3], 1.0).unwrap();
        let x = QuantTensor::zeros(vec![3, 2], 1.0).unwrap();
        let y = WideTensor::new(vec![2, 3], vec![0; 6], 1.0).unwrap();
        assert!(matches!(checksum_ws(&w, &x, &y), Err(Error::InvalidArgument(_))));
        assert!(matches!(checksum_os(&w, &x, &y), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn classify_examples() {
        let r = region(&[(0.0, 2.0), (1.0, 1.0)]);
        // boundary 2 - f
        let clean = ErrorStats::from_mismatches(vec![0, 0], 1.0, false);
        assert_eq!(classify(&clean, &r), Decision::Keep);
        let st = ErrorStats::from_mismatches(vec![1, 0], 1.0, false);
        assert_eq!(st.freq, 0.5);
        assert_eq!(classify(&st, &r), Decision::Keep);
        let st = ErrorStats::from_mismatches(vec![16, 0], 10.0, false);
        assert_eq!(classify(&st, &r), Decision::Recompute);
        let on = ErrorStats::from_mismatches(vec![3, 0], 2.0, false);
        assert_eq!(on.max_mag, 1.5);
        assert_eq!(classify(&on, &r), Decision::Keep);
    }

    #[test]
    fn zero_region_keeps_only_clean() {
        let r = region(&[(0.0, 0.0), (1.0, 0.0)]);
        assert_eq!(
            classify(&ErrorStats::from_mismatches(vec![0; 4], 1.0, false), &r),
            Decision::Keep
        );
        assert_eq!(
            classify(&ErrorStats::from_mismatches(vec![1, 0, 0, 0], 1.0, false), &r),
            Decision::Recompute
        );
    }

    #[test]
    fn region_rejects_increasing_boundary() {
        assert!(CriticalRegion::new(vec![Knot { f: 0.0, m: 1.0 }, Knot { f: 1.0, m: 2.0 }], 0.1).is_err());
        assert!(CriticalRegion::new(vec![], 0.1).is_err());
    }

    #[test]
    fn protected_no_faults() {
        let mut s = SeededStream::new(5);
        let w = random_q(8, 16, &mut s);
        let x = random_q(16, 8, &mut s);
        let plan = ChecksumPlan::new(Dataflow::WeightStationary, 4, 4, 16);
        let r = region(&[(0.0, 5.0), (1.0, 1.0)]);
        let out = protected_gemm(&w, &x, &plan, &r, &FaultModel::None, ProtectOptions::default()).unwrap();
        assert_eq!(out.y, gemm(&w, &x).unwrap());
        assert_eq!(out.recompute_count(), 0);
        assert_eq!(out.decision(), Decision::Keep);
        assert_eq!(out.audit.len(), 4);
    }

    #[test]
    fn large_fault_is_recomputed_once() {
        let mut s = SeededStream::new(6);
        let w = random_q(8, 16, &mut s);
        let x = random_q(16, 8, &mut s);
        let plan = ChecksumPlan::new(Dataflow::OutputStationary, 4, 4, 16);
        let r = region(&[(0.0, 5.0), (1.0, 1.0)]);
        let faults = FaultModel::Explicit(vec![Fault {
            row: 5,
            col: 6,
            delta: 1000,
        }]);
        let out = protected_gemm(&w, &x, &plan, &r, &faults, ProtectOptions::default()).unwrap();
        assert_eq!(out.y, gemm(&w, &x).unwrap());
        assert_eq!(out.recompute_count(), 1);
        let hit = out.audit.iter().find(|a| a.recompute_count > 0).unwrap();
        assert_eq!((hit.row_start, hit.col_start), (4, 4));
    }

    #[test]
    fn small_faults_are_tolerated() {
        let mut s = SeededStream::new(7);
        let w = random_q(8, 16, &mut s);
        let x = random_q(16, 8, &mut s);
        let plan = ChecksumPlan::new(Dataflow::WeightStationary, 8, 8, 16);
        let r = region(&[(0.0, 5.0), (1.0, 3.0)]);
        let faults = FaultModel::Explicit(
            (0..8)
                .map(|c| Fault {
                    row: c,
                    col: c,
                    delta: 2,
                })
                .collect(),
        );
        let out = protected_gemm(&w, &x, &plan, &r, &faults, ProtectOptions::default()).unwrap();
        assert_eq!(out.recompute_count(), 0);
        assert_ne!(out.y, gemm(&w, &x).unwrap());
        let st = out.stats().unwrap();
        assert_eq!(st.freq, 1.0);
        assert_eq!(st.max_mag, 2.0);
    }

    #[test]
    fn persistent_fault_exhausts_budget() {
        let mut s = SeededStream::new(8);
        let w = random_q(4, 4, &mut s);
        let x = random_q(4, 4, &mut s);
        let plan = ChecksumPlan::new(Dataflow::WeightStationary, 4, 4, 4);
        let r = region(&[(0.0, 1.0), (1.0, 1.0)]);
        let faults = FaultModel::Explicit(vec![Fault {
            row: 0,
            col: 0,
            delta: 50,
        }]);
        let opts = ProtectOptions {
            max_rounds: 3,
            persistent: true,
        };
        match protected_gemm(&w, &x, &plan, &r, &faults, opts) {
            Err(Error::UnrecoverableFault { rounds, stats, .. }) => {
                assert_eq!(rounds, 3);
                assert_eq!(stats.max_mag, 50.0);
            }
            other => panic!("expected unrecoverable fault, got {other:?}"),
        }
    }

    #[test]
    fn calibration_vacuous_and_strict_thresholds() {
        let grid = CalibrationGrid {
            freqs: vec![0.25, 0.5, 1.0],
            mags: vec![1.0, 2.0, 4.0],
        };
        let surface = |f: f64, m: f64| Ok(f * m * 0.1);
        let inf = calibrate_region(&grid, f64::INFINITY, surface).unwrap();
        assert!(inf.region.knots.iter().all(|k| k.m == 4.0));
        let zero = calibrate_region(&grid, 0.0, surface).unwrap();
        assert!(zero.region.knots.iter().all(|k| k.m == 0.0));
    }

    #[test]
    fn calibration_interpolates_and_is_monotone() {
        let grid = CalibrationGrid {
            freqs: vec![0.25, 0.5, 1.0],
            mags: vec![1.0, 2.0, 4.0],
        };
        // degradation f*m: threshold 0.5
        let c = calibrate_region(&grid, 0.5, |f, m| Ok(f * m)).unwrap();
        let m: Vec<f64> = c.region.knots.iter().map(|k| k.m).collect();
        // f=0.25: 0.25,0.5 -> crossing at m=2 exactly; f=0.5: 0.5 at m=1 -> 0
        assert_eq!(m, vec![2.0, 0.0, 0.0]);
        let c = calibrate_region(&grid, 0.75, |f, m| Ok(f * m)).unwrap();
        // f=0.25: 0.25, 0.5, 1.0 -> between 2 and 4 at t=0.5 -> 3
        // f=0.5: 0.5, 1.0 -> between 1 and 2 at t=0.5 -> 1.5
        // f=1.0: 1.0 at m=1 -> 0
        let m: Vec<f64> = c.region.knots.iter().map(|k| k.m).collect();
        assert_eq!(m, vec![3.0, 1.5, 0.0]);
    }

    #[test]
    fn calibration_grid_needs_three_points() {
        let grid = CalibrationGrid {
            freqs: vec![0.5, 1.0],
            mags: vec![1.0, 2.0, 3.0],
        };
        assert!(calibrate_region(&grid, 1.0, |_, _| Ok(0.0)).is_err());
    }
}
