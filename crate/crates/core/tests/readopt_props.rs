use proptest::prelude::*;
use relsa::dta::TimingEnv;
use relsa::readopt::{
    cluster_output_channels, cluster_then_reorder, evaluate_ter_reduction, execute_plan, reorder_by_positive_fraction,
    sign_difference, Reduction, ReorderPlan,
};
use relsa::stream::SeededStream;
use relsa::tensor::{gemm, sign_matrix, QuantTensor, SignMatrix};

fn signs(len: usize) -> impl Strategy<Value = Vec<i8>> {
    prop::collection::vec(prop::bool::ANY.prop_map(|b| if b { 1i8 } else { -1 }), len)
}

proptest! {
    #[test]
    fn sign_difference_is_a_metric(x in signs(24), y in signs(24), z in signs(24)) {
        let d = |a: &[i8], b: &[i8]| sign_difference(a, b).unwrap();
        prop_assert_eq!(d(&x, &x), 0);
        prop_assert_eq!(d(&x, &y) == 0, x == y);
        prop_assert_eq!(d(&x, &y), d(&y, &x));
        prop_assert!(d(&x, &z) <= d(&x, &y) + d(&y, &z));
        let differing = x.iter().zip(&y).filter(|(a, b)| a != b).count() as u64;
        prop_assert_eq!(d(&x, &y), 2 * differing);
    }
}

#[test]
fn sign_difference_symmetric_on_random_pairs() {
    let mut s = SeededStream::new(5);
    for _ in 0..1000 {
        let n = 1 + s.next_index(40);
        let x: Vec<i8> = (0..n).map(|_| if s.next_bool(0.5) { 1 } else { -1 }).collect();
        let y: Vec<i8> = (0..n).map(|_| if s.next_bool(0.5) { 1 } else { -1 }).collect();
        assert_eq!(sign_difference(&x, &y).unwrap(), sign_difference(&y, &x).unwrap());
    }
}

/// Σ over rows of SD to the cluster's elementwise-majority centroid (ties +1).
fn oracle_objective(s: &SignMatrix, clusters: &[Vec<usize>]) -> u64 {
    let mut total = 0;
    for c in clusters {
        let centroid: Vec<i8> = (0..s.cols())
            .map(|j| {
                let sum: i32 = c.iter().map(|&r| s.at(r, j) as i32).sum();
                if sum >= 0 {
                    1
                } else {
                    -1
                }
            })
            .collect();
        for &r in c {
            total += sign_difference(s.row(r), &centroid).unwrap();
        }
    }
    total
}

/// Minimum over all C(8,4) = 70 ordered balanced 2-partitions.
fn brute_force_optimum(s: &SignMatrix) -> u64 {
    let mut best = u64::MAX;
    for mask in 0u32..256 {
        if mask.count_ones() != 4 {
            continue;
        }
        let a: Vec<usize> = (0..8).filter(|r| mask >> r & 1 == 1).collect();
        let b: Vec<usize> = (0..8).filter(|r| mask >> r & 1 == 0).collect();
        best = best.min(oracle_objective(s, &[a, b]));
    }
    best
}

fn random_signs(rows: usize, cols: usize, s: &mut SeededStream) -> SignMatrix {
    let v: Vec<i8> = (0..rows * cols)
        .map(|_| if s.next_bool(0.5) { 1 } else { -1 })
        .collect();
    SignMatrix::from_signs(rows, cols, v).unwrap()
}

#[test]
fn eight_row_clustering_matches_exhaustive_optimum() {
    let mut s = SeededStream::new(21);
    for trial in 0..300 {
        let cols = 4 + s.next_index(29);
        let m = random_signs(8, cols, &mut s);
        let c = cluster_output_channels(&m, 2, 50, trial).unwrap();
        assert_eq!(
            c.objective,
            oracle_objective(&m, &c.clusters),
            "reported objective, trial {trial}"
        );
        assert_eq!(c.objective, brute_force_optimum(&m), "trial {trial}");
    }
}

#[test]
fn clustering_beats_random_balanced_partitions() {
    let mut s = SeededStream::new(8);
    let m = random_signs(8, 16, &mut s);
    let c = cluster_output_channels(&m, 2, 50, 0).unwrap();
    for _ in 0..200 {
        let mut rows: Vec<usize> = (0..8).collect();
        s.shuffle(&mut rows);
        let (a, b) = rows.split_at(4);
        assert!(c.objective <= oracle_objective(&m, &[a.to_vec(), b.to_vec()]));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn clustering_is_balanced_and_monotone(seed in any::<u64>(), rows in 2usize..40, k in 1usize..6) {
        let k = k.min(rows);
        let mut s = SeededStream::new(seed);
        let m = random_signs(rows, 12, &mut s);
        let c = cluster_output_channels(&m, k, 50, seed).unwrap();
        let sizes: Vec<usize> = c.clusters.iter().map(Vec::len).collect();
        prop_assert_eq!(sizes.iter().sum::<usize>(), rows);
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        prop_assert!(c.history.windows(2).all(|w| w[1] <= w[0]));
        prop_assert_eq!(*c.history.last().unwrap(), c.objective);
        prop_assert_eq!(c.objective, oracle_objective(&m, &c.clusters));
        let again = cluster_output_channels(&m, k, 50, seed).unwrap();
        prop_assert_eq!(again, c);
    }

    #[test]
    fn plans_preserve_error_free_results(seed in any::<u64>(), m in 1usize..10, n in 1usize..20, k in 1usize..4) {
        let mut s = SeededStream::new(seed);
        let w = QuantTensor::from_fn(m, n, 0.5, |_, _| s.next_range_i64(-128, 127) as i8);
        let x = QuantTensor::from_fn(n, k, 0.25, |_, _| s.next_range_i64(-128, 127) as i8);
        let clusters = 1 + s.next_index(m);
        let plan = cluster_then_reorder(&w, clusters, seed).unwrap();
        plan.validate(m, n).unwrap();
        let (y, _) = execute_plan(&w, &x, &plan, &TimingEnv::default().error_free()).unwrap();
        prop_assert_eq!(y, gemm(&w, &x).unwrap());
    }
}

#[test]
fn direct_reorder_bounds_flips_on_a_single_output() {
    // 1×16 mixed-sign weights against unit activations
    let weights: [i8; 16] = [5, -7, 3, -2, 9, -4, 1, -8, 6, -3, 2, -5, 4, -6, 7, -1];
    let w = QuantTensor::from_fn(1, 16, 1.0, |_, c| weights[c]);
    let x = QuantTensor::from_fn(16, 1, 1.0, |_, _| 1);
    let env = TimingEnv::default().error_free();
    let flips = |plan: &ReorderPlan| execute_plan(&w, &x, plan, &env).unwrap().1.max_flips_per_output;

    // exhaustive oracle: walk the running sum for every prefix of the order
    let count = |order: &[usize]| {
        let mut acc = 0i32;
        let mut n = 0;
        for &t in order {
            let next = acc + weights[t] as i32;
            n += ((acc < 0) != (next < 0)) as u64;
            acc = next;
        }
        n
    };
    let direct = ReorderPlan::direct(&w).unwrap();
    assert_eq!(flips(&direct), count(&direct.input_perm));
    assert!(flips(&direct) <= 1);
    let interleaved: Vec<usize> = (0..16).collect();
    assert!(count(&interleaved) >= 1);
    let identity = ReorderPlan::identity(1, 16);
    assert_eq!(flips(&identity), count(&interleaved));

    let env = TimingEnv {
        clock_period: 1.43,
        ..TimingEnv::default()
    };
    let eval = evaluate_ter_reduction(&w, &x, &direct, &env).unwrap();
    assert!(eval.baseline.ter > eval.optimized.ter);
    match eval.reduction {
        Reduction::Factor(f) => assert!(f > 1.0),
        Reduction::NoErrors => {}
    }
}

#[test]
fn separated_sign_groups_are_clustered_apart() {
    // rows 0..4 mostly non-negative, rows 4..8 mostly negative, with
    // row-specific exceptions in distinct columns
    let w = QuantTensor::from_fn(8, 12, 1.0, |r, c| {
        let base: i8 = if r < 4 { 3 } else { -3 };
        if c == r {
            -base
        } else {
            base
        }
    });
    let plan = cluster_then_reorder(&w, 2, 3).unwrap();
    assert_eq!(plan.clusters, vec![vec![0, 1, 2, 3], vec![4, 5, 6, 7]]);
    // the first cluster's exceptions (columns 0..4) move to the back
    assert_eq!(plan.per_cluster_perms[0], vec![4, 5, 6, 7, 8, 9, 10, 11, 0, 1, 2, 3]);
    // in the negative cluster only columns 4..8 hold non-negative weights
    assert_eq!(plan.per_cluster_perms[1], vec![4, 5, 6, 7, 0, 1, 2, 3, 8, 9, 10, 11]);
    let s = sign_matrix(&w).unwrap();
    assert_eq!(s.rows(), 8);
    assert_eq!(reorder_by_positive_fraction(&w).unwrap().len(), 12);
}
