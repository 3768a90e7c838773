//! Reordering the reduction axis to suppress accumulator sign flips.
//!
//! With non-negative activations, accumulating non-negative weights first
//! makes every partial sum rise and then fall, so the sign flips at most once
//! per output. One shared input-channel order cannot be ideal for every
//! output channel, so output channels with similar sign patterns are first
//! grouped (balanced k-means under the Manhattan metric on the sign matrix)
//! and each group gets its own input-channel order.

use serde::{Deserialize, Serialize};

use crate::dta::TimingEnv;
use crate::error::{Error, Result};
use crate::macsim::{self, TerReport};
use crate::stream::SeededStream;
use crate::tensor::{sign_matrix, QuantTensor, SignMatrix, WideTensor};

/// Independent restarts of the balanced clustering.
const RESTARTS: u64 = 12;

/// Input channels by descending fraction of non-negative weights in their
/// column; equal fractions keep ascending index order.
pub fn reorder_by_positive_fraction(w: &QuantTensor) -> Result<Vec<usize>> {
    let (rows, cols) = w.shape2()?;
    let mut counts = vec![0usize; cols];
    for r in 0..rows {
        for (c, &v) in w.row(r).iter().enumerate() {
            counts[c] += (v >= 0) as usize;
        }
    }
    let mut perm: Vec<usize> = (0..cols).collect();
    // every column shares the denominator `rows`, so counts order fractions
    perm.sort_by(|&a, &b| counts[b].cmp(&counts[a]));
    Ok(perm)
}

/// Manhattan distance between two ±1 sign vectors.
pub fn sign_difference(x: &[i8], y: &[i8]) -> Result<u64> {
    if x.len() != y.len() {
        return Err(Error::invalid(format!(
            "sign vectors differ in length: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    Ok(x.iter()
        .zip(y)
        .map(|(&a, &b)| (a as i16 - b as i16).unsigned_abs() as u64)
        .sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    pub clusters: Vec<Vec<usize>>,
    /// Σ over rows of the SD to their cluster's majority-sign centroid.
    pub objective: u64,
    /// Objective after each accepted step of the winning restart.
    pub history: Vec<u64>,
}

/// Objective of an assignment: per cluster and column, the minority count
/// costs 2 (each minority entry differs from the majority centroid by 2).
fn objective(s: &SignMatrix, assign: &[usize], k: usize) -> u64 {
    let cols = s.cols();
    let mut pos = vec![0u32; k * cols];
    let mut size = vec![0u32; k];
    for (r, &c) in assign.iter().enumerate() {
        size[c] += 1;
        for (j, &v) in s.row(r).iter().enumerate() {
            pos[c * cols + j] += (v > 0) as u32;
        }
    }
    let mut total = 0u64;
    for c in 0..k {
        for j in 0..cols {
            let p = pos[c * cols + j];
            total += 2 * p.min(size[c] - p) as u64;
        }
    }
    total
}

/// Majority-sign centroid per cluster; ties go to +1.
fn centroids(s: &SignMatrix, assign: &[usize], k: usize) -> Vec<Vec<i8>> {
    let cols = s.cols();
    let mut sum = vec![vec![0i32; cols]; k];
    for (r, &c) in assign.iter().enumerate() {
        for (j, &v) in s.row(r).iter().enumerate() {
            sum[c][j] += v as i32;
        }
    }
    sum.into_iter()
        .map(|col| col.into_iter().map(|t| if t >= 0 { 1 } else { -1 }).collect())
        .collect()
}

fn distances(s: &SignMatrix, cents: &[Vec<i8>]) -> Vec<Vec<u64>> {
    (0..s.rows())
        .map(|r| {
            cents
                .iter()
                .map(|c| s.row(r).iter().zip(c).filter(|(a, b)| a != b).count() as u64 * 2)
                .collect()
        })
        .collect()
}

/// Capacity bookkeeping for a balanced partition of `n` rows into `k`.
struct Capacity {
    floor: usize,
    rem: usize,
    big: usize,
    size: Vec<usize>,
}

impl Capacity {
    fn new(n: usize, k: usize) -> Self {
        Self {
            floor: n / k,
            rem: n % k,
            big: 0,
            size: vec![0; k],
        }
    }

    fn is_full(&self, c: usize) -> bool {
        let s = self.size[c];
        s > self.floor || (s == self.floor && self.big == self.rem)
    }

    fn add(&mut self, c: usize) {
        self.size[c] += 1;
        if self.size[c] == self.floor + 1 {
            self.big += 1;
        }
    }
}

/// Assign rows to their nearest non-full centroid, rows with the largest
/// margin between best and second-best centroid first.
fn greedy_balanced(dist: &[Vec<u64>], k: usize) -> Vec<usize> {
    let n = dist.len();
    let mut order: Vec<(u64, usize)> = dist
        .iter()
        .enumerate()
        .map(|(r, d)| {
            let mut sorted = d.clone();
            sorted.sort_unstable();
            let margin = if k > 1 { sorted[1] - sorted[0] } else { 0 };
            (margin, r)
        })
        .collect();
    order.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut cap = Capacity::new(n, k);
    let mut assign = vec![0usize; n];
    for (_, r) in order {
        let best = (0..k)
            .filter(|&c| !cap.is_full(c))
            .min_by_key(|&c| (dist[r][c], c))
            .expect("balanced capacities always leave room");
        cap.add(best);
        assign[r] = best;
    }
    assign
}

fn random_balanced(n: usize, k: usize, stream: &mut SeededStream) -> Vec<usize> {
    let mut rows: Vec<usize> = (0..n).collect();
    stream.shuffle(&mut rows);
    let mut assign = vec![0; n];
    for (pos, r) in rows.into_iter().enumerate() {
        assign[r] = pos % k;
    }
    assign
}

/// Per-cluster, per-column counts of non-negative entries.
struct SignCounts {
    cols: usize,
    pos: Vec<u32>,
    size: Vec<u32>,
}

impl SignCounts {
    fn new(s: &SignMatrix, assign: &[usize], k: usize) -> Self {
        let cols = s.cols();
        let mut counts = Self {
            cols,
            pos: vec![0; k * cols],
            size: vec![0; k],
        };
        for (r, &c) in assign.iter().enumerate() {
            counts.size[c] += 1;
            for (j, &v) in s.row(r).iter().enumerate() {
                counts.pos[c * cols + j] += (v > 0) as u32;
            }
        }
        counts
    }

    /// Exact objective change if rows `i` (in `a`) and `j` (in `b`) swap.
    fn swap_delta(&self, s: &SignMatrix, i: usize, a: usize, j: usize, b: usize) -> i64 {
        let cost = |p: u32, n: u32| 2 * p.min(n - p) as i64;
        let (na, nb) = (self.size[a], self.size[b]);
        let mut delta = 0;
        for (t, (&vi, &vj)) in s.row(i).iter().zip(s.row(j)).enumerate() {
            if vi == vj {
                continue;
            }
            // i leaves a and j joins it; the reverse for b
            let shift: i32 = if vj > 0 { 1 } else { -1 };
            let pa = self.pos[a * self.cols + t];
            let pb = self.pos[b * self.cols + t];
            let pa2 = (pa as i32 + shift) as u32;
            let pb2 = (pb as i32 - shift) as u32;
            delta += cost(pa2, na) - cost(pa, na) + cost(pb2, nb) - cost(pb, nb);
        }
        delta
    }

    fn apply_swap(&mut self, s: &SignMatrix, i: usize, a: usize, j: usize, b: usize) {
        for (t, (&vi, &vj)) in s.row(i).iter().zip(s.row(j)).enumerate() {
            let (pi, pj) = ((vi > 0) as u32, (vj > 0) as u32);
            self.pos[a * self.cols + t] = self.pos[a * self.cols + t] - pi + pj;
            self.pos[b * self.cols + t] = self.pos[b * self.cols + t] - pj + pi;
        }
    }
}

/// Steepest-descent pairwise swaps between clusters (sizes unchanged) until
/// no swap lowers the objective.
fn refine_by_swaps(s: &SignMatrix, assign: &mut [usize], k: usize, obj: &mut u64, history: &mut Vec<u64>) {
    let n = assign.len();
    let mut counts = SignCounts::new(s, assign, k);
    loop {
        let mut best: Option<(i64, usize, usize)> = None;
        for i in 0..n {
            for j in (i + 1)..n {
                let (a, b) = (assign[i], assign[j]);
                if a == b {
                    continue;
                }
                let d = counts.swap_delta(s, i, a, j, b);
                if d < 0 && best.is_none_or(|(bd, _, _)| d < bd) {
                    best = Some((d, i, j));
                }
            }
        }
        let Some((d, i, j)) = best else { break };
        let (a, b) = (assign[i], assign[j]);
        counts.apply_swap(s, i, a, j, b);
        assign.swap(i, j);
        *obj = (*obj as i64 + d) as u64;
        history.push(*obj);
    }
}

fn run_once(s: &SignMatrix, k: usize, max_iters: usize, init: Vec<usize>) -> (Vec<usize>, u64, Vec<u64>) {
    let mut assign = init;
    let mut obj = objective(s, &assign, k);
    let mut history = vec![obj];
    for _ in 0..max_iters {
        let dist = distances(s, &centroids(s, &assign, k));
        let next = greedy_balanced(&dist, k);
        let next_obj = objective(s, &next, k);
        if next_obj >= obj {
            break;
        }
        assign = next;
        obj = next_obj;
        history.push(obj);
    }
    refine_by_swaps(s, &mut assign, k, &mut obj, &mut history);
    debug_assert_eq!(obj, objective(s, &assign, k));
    (assign, obj, history)
}

/// Balanced partition of the rows of `s` into `k` clusters.
pub fn cluster_output_channels(s: &SignMatrix, k: usize, max_iters: usize, seed: u64) -> Result<Clustering> {
    let n = s.rows();
    if k == 0 {
        return Err(Error::invalid("cluster count must be at least 1"));
    }
    if k > n {
        return Err(Error::invalid(format!("cluster count {k} exceeds {n} rows")));
    }
    let mut best: Option<(Vec<usize>, u64, Vec<u64>)> = None;
    let restarts = if k == 1 { 1 } else { RESTARTS };
    for restart in 0..restarts {
        let mut stream = SeededStream::with_stream(seed, restart);
        let init = random_balanced(n, k, &mut stream);
        let run = run_once(s, k, max_iters, init);
        if best.as_ref().is_none_or(|b| run.1 < b.1) {
            best = Some(run);
        }
    }
    let (assign, objective, history) = best.expect("at least one restart");
    let mut clusters = vec![Vec::new(); k];
    for (r, &c) in assign.iter().enumerate() {
        clusters[c].push(r);
    }
    // canonical order: by smallest member
    clusters.sort_by_key(|c| c.first().copied().unwrap_or(usize::MAX));
    Ok(Clustering {
        clusters,
        objective,
        history,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReorderPlan {
    /// Whole-matrix order (the plan's order when there is one cluster).
    pub input_perm: Vec<usize>,
    pub clusters: Vec<Vec<usize>>,
    pub per_cluster_perms: Vec<Vec<usize>>,
}

impl ReorderPlan {
    pub fn identity(c_out: usize, c_in: usize) -> Self {
        let perm: Vec<usize> = (0..c_in).collect();
        Self {
            input_perm: perm.clone(),
            clusters: vec![(0..c_out).collect()],
            per_cluster_perms: vec![perm],
        }
    }

    /// One shared order for every output channel.
    pub fn direct(w: &QuantTensor) -> Result<Self> {
        let (c_out, _) = w.shape2()?;
        let perm = reorder_by_positive_fraction(w)?;
        Ok(Self {
            input_perm: perm.clone(),
            clusters: vec![(0..c_out).collect()],
            per_cluster_perms: vec![perm],
        })
    }

    pub fn validate(&self, c_out: usize, c_in: usize) -> Result<()> {
        macsim::check_permutation(&self.input_perm, c_in)?;
        if self.clusters.len() != self.per_cluster_perms.len() {
            return Err(Error::invalid("plan needs one input permutation per cluster"));
        }
        let mut seen = vec![false; c_out];
        for cluster in &self.clusters {
            for &r in cluster {
                if r >= c_out || seen[r] {
                    return Err(Error::invalid(format!("clusters do not partition 0..{c_out}")));
                }
                seen[r] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::invalid(format!("clusters do not cover 0..{c_out}")));
        }
        let min = self.clusters.iter().map(Vec::len).min().unwrap_or(0);
        let max = self.clusters.iter().map(Vec::len).max().unwrap_or(0);
        if max - min > 1 {
            return Err(Error::invalid("clusters are not balanced"));
        }
        for p in &self.per_cluster_perms {
            macsim::check_permutation(p, c_in)?;
        }
        Ok(())
    }
}

/// Cluster output channels by sign pattern, then reorder inputs per cluster.
pub fn cluster_then_reorder(w: &QuantTensor, k: usize, seed: u64) -> Result<ReorderPlan> {
    let s = sign_matrix(w)?;
    let clustering = cluster_output_channels(&s, k, 50, seed)?;
    let per_cluster_perms = clustering
        .clusters
        .iter()
        .map(|rows| reorder_by_positive_fraction(&w.select_rows(rows)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(ReorderPlan {
        input_perm: reorder_by_positive_fraction(w)?,
        clusters: clustering.clusters,
        per_cluster_perms,
    })
}

/// Runs every cluster with its own order and scatters rows back in place.
pub fn execute_plan(
    w: &QuantTensor,
    x: &QuantTensor,
    plan: &ReorderPlan,
    env: &TimingEnv,
) -> Result<(WideTensor, TerReport)> {
    let (c_out, c_in) = w.shape2()?;
    let (_, k) = x.shape2()?;
    plan.validate(c_out, c_in)?;
    let mut out = vec![0i32; c_out * k];
    let mut report = TerReport::default();
    for (rows, perm) in plan.clusters.iter().zip(&plan.per_cluster_perms) {
        if rows.is_empty() {
            continue;
        }
        let sub = w.select_rows(rows)?;
        let run = macsim::run_tile_keyed(&sub, x, env, perm, rows, false)?;
        for (local, &r) in rows.iter().enumerate() {
            for j in 0..k {
                out[r * k + j] = run.output.at(local, j);
            }
        }
        report = report.merge(&run.report);
    }
    Ok((WideTensor::new(vec![c_out, k], out, w.scale() * x.scale())?, report))
}

/// TER reduction factor, or a distinct outcome when the plan leaves no errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Factor(f64),
    NoErrors,
}

impl Reduction {
    fn from_rates(baseline: f64, optimized: f64) -> Self {
        if optimized == 0.0 {
            if baseline == 0.0 {
                Reduction::Factor(1.0)
            } else {
                Reduction::NoErrors
            }
        } else {
            Reduction::Factor(baseline / optimized)
        }
    }

    pub fn factor(&self) -> Option<f64> {
        match self {
            Reduction::Factor(f) => Some(*f),
            Reduction::NoErrors => None,
        }
    }
}

impl std::fmt::Display for Reduction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Reduction::Factor(v) => write!(f, "{v:.6}"),
            Reduction::NoErrors => write!(f, "no-errors"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TerEvaluation {
    pub baseline: TerReport,
    pub optimized: TerReport,
    pub reduction: Reduction,
    pub flip_reduction: Reduction,
}

pub fn evaluate_ter_reduction(
    w: &QuantTensor,
    x: &QuantTensor,
    plan: &ReorderPlan,
    env: &TimingEnv,
) -> Result<TerEvaluation> {
    let (c_out, c_in) = w.shape2()?;
    let (_, baseline) = execute_plan(w, x, &ReorderPlan::identity(c_out, c_in), env)?;
    let (_, optimized) = execute_plan(w, x, plan, env)?;
    Ok(TerEvaluation {
        reduction: Reduction::from_rates(baseline.ter, optimized.ter),
        flip_reduction: Reduction::from_rates(baseline.flip_rate, optimized.flip_rate),
        baseline,
        optimized,
    })
}

/// Cluster-then-reorder for each `k` (capped at the row count), with the
/// TER report of every resulting plan, in `ks` order.
pub fn best_cluster_plan(
    w: &QuantTensor,
    x: &QuantTensor,
    ks: &[usize],
    env: &TimingEnv,
    seed: u64,
) -> Result<Vec<(usize, ReorderPlan, TerReport)>> {
    let (c_out, _) = w.shape2()?;
    let mut out = Vec::new();
    for &k in ks {
        let k = k.min(c_out).max(1);
        let plan = cluster_then_reorder(w, k, seed)?;
        let (_, report) = execute_plan(w, x, &plan, env)?;
        out.push((k, plan, report));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_nonnegative_is_identity() {
        let w = QuantTensor::from_fn(3, 5, 1.0, |r, c| (r + c) as i8);
        assert_eq!(reorder_by_positive_fraction(&w).unwrap(), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn fractions_sorted_descending() {
        // column fractions 0.2, 1.0, 0.5 over 10 rows
        let w = QuantTensor::from_fn(10, 3, 1.0, |r, c| match c {
            0 => {
                if r < 2 {
                    1
                } else {
                    -1
                }
            }
            1 => 4,
            _ => {
                if r < 5 {
                    0
                } else {
                    -3
                }
            }
        });
        assert_eq!(reorder_by_positive_fraction(&w).unwrap(), vec![1, 2, 0]);
    }

    #[test]
    fn sign_difference_examples() {
        assert_eq!(sign_difference(&[1, -1, 1], &[1, -1, 1]).unwrap(), 0);
        assert_eq!(sign_difference(&[1, -1, 1], &[1, 1, -1]).unwrap(), 4);
        assert!(matches!(sign_difference(&[1], &[1, 1]), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn single_cluster() {
        let w = QuantTensor::from_fn(5, 4, 1.0, |r, c| if (r + c) % 2 == 0 { 1 } else { -1 });
        let s = sign_matrix(&w).unwrap();
        let c = cluster_output_channels(&s, 1, 50, 0).unwrap();
        assert_eq!(c.clusters, vec![vec![0, 1, 2, 3, 4]]);
    }

    #[test]
    fn pure_patterns_separate() {
        let a = [1i8, 1, -1, -1, 1, -1];
        let b = [-1i8, 1, 1, -1, -1, 1];
        let rows = [0usize, 1, 0, 1, 1, 0, 0, 1];
        let mut signs = Vec::new();
        for &r in &rows {
            signs.extend_from_slice(if r == 0 { &a } else { &b });
        }
        let s = SignMatrix::from_signs(8, 6, signs).unwrap();
        let c = cluster_output_channels(&s, 2, 50, 3).unwrap();
        assert_eq!(c.objective, 0);
        assert_eq!(c.clusters, vec![vec![0, 2, 5, 6], vec![1, 3, 4, 7]]);
    }

    #[test]
    fn k_larger_than_rows_rejected() {
        let s = SignMatrix::from_signs(2, 1, vec![1, -1]).unwrap();
        assert!(matches!(
            cluster_output_channels(&s, 3, 50, 0),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            cluster_output_channels(&s, 0, 50, 0),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn balanced_sizes_with_remainder() {
        let mut st = SeededStream::new(4);
        let signs = (0..10 * 6).map(|_| if st.next_bool(0.5) { 1 } else { -1 }).collect();
        let s = SignMatrix::from_signs(10, 6, signs).unwrap();
        let c = cluster_output_channels(&s, 4, 50, 1).unwrap();
        let mut sizes: Vec<usize> = c.clusters.iter().map(Vec::len).collect();
        sizes.sort();
        assert_eq!(sizes, vec![2, 2, 3, 3]);
        assert!(c.history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn k1_plan_matches_direct() {
        let w = QuantTensor::from_fn(6, 7, 1.0, |r, c| ((r * 5 + c * 3) % 7) as i8 - 3);
        let plan = cluster_then_reorder(&w, 1, 0).unwrap();
        let direct = ReorderPlan::direct(&w).unwrap();
        assert_eq!(plan, direct);
    }

    #[test]
    fn invalid_plan_rejected() {
        let mut plan = ReorderPlan::identity(4, 3);
        plan.clusters = vec![vec![0, 1, 2]];
        assert!(plan.validate(4, 3).is_err());
        let mut plan = ReorderPlan::identity(4, 3);
        plan.clusters = vec![vec![0, 1, 2], vec![3]];
        plan.per_cluster_perms.push(vec![0, 1, 2]);
        assert!(plan.validate(4, 3).is_err(), "3 vs 1 is unbalanced");
    }

    #[test]
    fn identity_plan_reduction_is_one() {
        let w = QuantTensor::from_fn(4, 8, 1.0, |r, c| ((r * 3 + c * 5) % 11) as i8 - 5);
        let x = QuantTensor::from_fn(8, 3, 1.0, |r, c| ((r + c) % 4) as i8);
        let env = TimingEnv::default();
        let ev = evaluate_ter_reduction(&w, &x, &ReorderPlan::identity(4, 8), &env).unwrap();
        assert_eq!(ev.baseline, ev.optimized);
        assert_eq!(ev.reduction, Reduction::Factor(1.0));
    }
}
