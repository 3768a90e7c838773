use proptest::prelude::*;
use relsa::dta::{
    fmax_from_chains, fmax_search, required_period, search_period, sta_period, AgingState, Method, TimingEnv,
    WorkloadProfile,
};
use relsa::tensor::QuantTensor;
use relsa::workload::{dta_suite, Workload};
use relsa::Error;

/// Smallest candidate that every requirement fits under, by linear scan.
fn linear_scan(required: &[f64]) -> f64 {
    let mut cands = required.to_vec();
    cands.sort_by(f64::total_cmp);
    *cands.iter().find(|&&t| required.iter().all(|&d| d <= t)).unwrap()
}

proptest! {
    #[test]
    fn period_search_matches_linear_scan(required in prop::collection::vec(0.01f64..5.0, 1..200)) {
        prop_assert_eq!(search_period(&required).unwrap(), linear_scan(&required));
    }

    #[test]
    fn required_period_grows_with_chain_length(duty in 0.0f64..1.0, l in 0u32..24) {
        let env = TimingEnv::default();
        let aging = AgingState {
            toggle_rate: vec![duty; 24],
            delta_vth: vec![env.aging.delta_vth(duty); 24],
        };
        for method in [Method::Corner, Method::Avatar] {
            let a = required_period(l, method, &aging, &env).unwrap();
            let b = required_period(l + 1, method, &aging, &env).unwrap();
            prop_assert!(b > a);
        }
    }

    #[test]
    fn more_aging_never_raises_fmax(duty in 0.0f64..0.5, extra in 0.0f64..0.5, chains in prop::collection::vec(0u32..=24, 1..50)) {
        let env = TimingEnv::default();
        let state = |d: f64| AgingState { toggle_rate: vec![d; 24], delta_vth: vec![env.aging.delta_vth(d); 24] };
        let young = fmax_from_chains(&chains, &state(duty), Method::Avatar, &env).unwrap();
        let old = fmax_from_chains(&chains, &state(duty + extra), Method::Avatar, &env).unwrap();
        prop_assert!(old.fmax <= young.fmax);
    }
}

#[test]
fn static_period_is_the_guardbanded_full_chain() {
    let env = TimingEnv::default();
    // (0.2 + 24 · 0.05) ns · 1.2
    assert!((sta_period(&env) - 1.68).abs() < 1e-12);
    let r = fmax_from_chains(&[24], &AgingState::fresh(24), Method::Corner, &env).unwrap();
    assert!((r.fmax - 1000.0 / 1.68).abs() < 1e-9);
    assert!(r.improvement_vs_sta.abs() < 1e-12);
}

#[test]
fn avatar_dominates_corner_on_the_suite() {
    let env = TimingEnv::default();
    let sta = 1000.0 / sta_period(&env);
    let mut strict = Vec::new();
    for wl in dta_suite(7) {
        let profile = WorkloadProfile::measure(&wl, &env).unwrap();
        assert!(profile.within_guardband(&env), "{}", wl.name);
        let avatar = profile.fmax(Method::Avatar, &env).unwrap();
        let corner = profile.fmax(Method::Corner, &env).unwrap();
        assert!(avatar.fmax >= corner.fmax, "{}", wl.name);
        assert!(corner.fmax >= sta, "{}", wl.name);
        if avatar.fmax > corner.fmax {
            strict.push(wl.name.clone());
        }
    }
    assert!(strict.iter().any(|n| n == "bubblesort_like"));
}

#[test]
fn all_zero_workload_is_priced_at_the_base_stage() {
    let w = QuantTensor::zeros(vec![4, 8], 1.0).unwrap();
    let x = QuantTensor::zeros(vec![8, 4], 1.0).unwrap();
    let wl = Workload::new("zeros", w, x);
    let env = TimingEnv::default();
    let corner = fmax_search(&wl, Method::Corner, &env).unwrap();
    assert_eq!(corner.max_chain_len, 0);
    assert!((corner.period_ns - 0.2 * 1.2).abs() < 1e-12);
    // no toggles, so no aging: μ + 3σ of the single base stage
    let avatar = fmax_search(&wl, Method::Avatar, &env).unwrap();
    assert!((avatar.period_ns - 0.2 * 1.03).abs() < 1e-12);
}

#[test]
fn empty_and_degenerate_searches_fail() {
    assert!(matches!(search_period(&[]), Err(Error::Internal(_))));
    assert!(matches!(search_period(&[0.0, 0.0]), Err(Error::Internal(_))));
    assert!(matches!(search_period(&[1.0, f64::NAN]), Err(Error::Internal(_))));
    let env = TimingEnv::default();
    assert!(fmax_from_chains(&[], &AgingState::fresh(24), Method::Corner, &env).is_err());
}

#[test]
fn invalid_env_is_rejected() {
    let env = TimingEnv {
        clock_period: -1.0,
        ..TimingEnv::default()
    };
    let wl = &dta_suite(1)[0];
    assert!(matches!(
        fmax_search(wl, Method::Avatar, &env),
        Err(Error::InvalidArgument(_))
    ));
}
