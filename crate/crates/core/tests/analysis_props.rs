mod common;

use chainserve::analysis::{
    birth_death_occupancy, bound_tuning, death_rate_bounds, envelope_processes, exact_k2, occupancy_bounds,
    transition_rates, BoundKind, ChainRates, JffcState,
};
use chainserve::model::{Cluster, ServerSpec, ServiceSpec};
use chainserve::oracles::{ctmc_stationary, mmc_mean_occupancy};
use chainserve::sim::{run_sim, Policy, SimConfig};
use chainserve::Error;
use common::*;
use proptest::prelude::*;

fn rates_strategy(max_k: usize, max_c: u64) -> impl Strategy<Value = ChainRates> {
    proptest::collection::vec((0.2..5.0f64, 1..=max_c), 1..=max_k)
        .prop_map(|pairs| ChainRates::new(pairs).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn ctmc_lies_between_the_bounds(rates in rates_strategy(3, 3), load in 0.05..0.9f64) {
        let lambda = load * rates.total_rate();
        let b = occupancy_bounds(&rates, lambda).unwrap();
        let ctmc = ctmc_stationary(&rates, lambda, 200).unwrap();
        prop_assert!(ctmc.tail_mass < 1e-8);
        prop_assert!(b.lower_mean_occupancy <= ctmc.mean_occupancy + 1e-9);
        prop_assert!(ctmc.mean_occupancy <= b.upper_mean_occupancy + 1e-9);
    }

    #[test]
    fn two_chain_recursion_lies_between_the_bounds(
        mu in (0.2..5.0f64, 0.2..5.0f64),
        c in (1..=8u64, 1..=8u64),
        load in 0.01..0.97f64,
    ) {
        let (mu1, mu2) = if mu.0 >= mu.1 { mu } else { (mu.1, mu.0) };
        let rates = ChainRates::new([(mu1, c.0), (mu2, c.1)]).unwrap();
        let lambda = load * rates.total_rate();
        let b = occupancy_bounds(&rates, lambda).unwrap();
        let exact = exact_k2(mu1, mu2, c.0, c.1, lambda).unwrap();
        let slack = 1e-9 * exact.max(1.0);
        prop_assert!(b.lower_mean_occupancy <= exact + slack);
        prop_assert!(exact <= b.upper_mean_occupancy + slack);
    }

    #[test]
    fn death_rate_envelopes_are_coherent(rates in rates_strategy(5, 6)) {
        let nu = rates.total_rate();
        let cap = rates.total_capacity();
        let mut prev = (0.0, 0.0);
        for n in 0..=cap + 3 {
            let (up, down) = death_rate_bounds(&rates, n);
            prop_assert!(down <= up + 1e-12);
            prop_assert!(up >= prev.0 && down >= prev.1);
            if n >= cap {
                prop_assert!((up - nu).abs() <= 1e-12 * nu && (down - nu).abs() <= 1e-12 * nu);
            }
            prev = (up, down);
        }
    }

    #[test]
    fn envelope_distributions_are_normalized(rates in rates_strategy(4, 50), load in 0.01..0.99f64) {
        let (lo, hi) = envelope_processes(&rates, load * rates.total_rate()).unwrap();
        prop_assert!((lo.total_mass() - 1.0).abs() < 1e-12);
        prop_assert!((hi.total_mass() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn occupancy_never_grows_with_a_death_rate(
        deaths in proptest::collection::vec(0.1..5.0f64, 1..8),
        which in any::<prop::sample::Index>(),
        bump in 0.001..2.0f64,
        load in 0.05..0.95f64,
    ) {
        let mut deaths = deaths;
        deaths.sort_by(f64::total_cmp);
        let tail = *deaths.last().unwrap();
        let lambda = load * tail;
        let base = birth_death_occupancy(lambda, &deaths, tail).unwrap().mean;
        let i = which.index(deaths.len());
        let mut faster = deaths.clone();
        faster[i] += bump;
        let tail2 = if i == deaths.len() - 1 { tail + bump } else { tail };
        let bumped = birth_death_occupancy(lambda, &faster, tail2).unwrap().mean;
        prop_assert!(bumped <= base * (1.0 + 1e-12));
    }
}

#[test]
fn transitions_follow_the_case_analysis() {
    let r = ChainRates::new([(3.0, 2), (1.0, 4)]).unwrap();
    // chain 1 idle, chain 2 full: arrival to chain 1, departures from chain 2
    let s = JffcState { queued: 0, busy: vec![0, 4] };
    let t = transition_rates(&r, 0.5, &s).unwrap();
    assert_eq!(t.len(), 2);
    assert!(t.contains(&(JffcState { queued: 0, busy: vec![1, 4] }, 0.5)));
    assert!(t.contains(&(JffcState { queued: 0, busy: vec![0, 3] }, 4.0)));
}

#[test]
fn bound_remark_lower_bound_is_not_tight() {
    // fast chain with one slot, slow chain with many: JFFC often leaves the
    // fast chain idle while slow jobs run, which the lower envelope ignores
    let pairs = [(4.0, 1), (0.5, 6)];
    let rates = ChainRates::new(pairs).unwrap();
    let lambda = 0.5 * rates.total_rate();
    let b = occupancy_bounds(&rates, lambda).unwrap();
    let run = run_sim(&SimConfig::from_rates(&pairs, lambda, Policy::Jffc, 200_000, 5, 10)).unwrap();
    let occ = run.stats.mean_occupancy;
    assert!(occ.lower() > b.lower_mean_occupancy, "{occ:?} vs {b:?}");
    assert!(occ.upper() > b.lower_mean_occupancy * 1.01);
}

#[test]
fn exact_recursion_handles_equal_rates_of_any_split() {
    for (c1, c2) in [(1, 1), (1, 5), (5, 1), (3, 4)] {
        let lambda = 0.8 * (c1 + c2) as f64;
        let exact = exact_k2(1.0, 1.0, c1, c2, lambda).unwrap();
        let mmc = mmc_mean_occupancy(c1 + c2, 1.0, lambda).unwrap();
        assert!((exact - mmc).abs() < 1e-9 * mmc, "({c1},{c2}): {exact} vs {mmc}");
    }
}

#[test]
fn lower_bound_tuning_prefers_small_capacity_at_light_load() {
    let cluster = identical_servers(10, 1.0, 0.1);
    let t = bound_tuning(&cluster, 1e-4, 0.7, BoundKind::Lower).unwrap();
    assert_eq!(t.best_c, 1);
    // and more capacity once the queue dominates
    let heavy = bound_tuning(&cluster, 4.0, 0.9, BoundKind::Lower).unwrap();
    assert!(heavy.best_c > 1);
}

#[test]
fn single_chain_instances_tune_identically() {
    // one server, so every c yields exactly one chain
    let service = ServiceSpec::new(4, 10, 1).unwrap();
    let cluster = Cluster::new(service, vec![ServerSpec::new("solo", 100, 0.5, 0.2)]).unwrap();
    for lambda in [0.1, 1.0, 5.0] {
        let lo = bound_tuning(&cluster, lambda, 0.8, BoundKind::Lower).unwrap();
        let hi = bound_tuning(&cluster, lambda, 0.8, BoundKind::Upper).unwrap();
        assert_eq!(lo.best_c, hi.best_c);
        assert!(lo.curve.iter().all(|p| p.chain_count.is_none_or(|k| k == 1)));
        assert_eq!(lo.curve, hi.curve);
    }
}

#[test]
fn tuning_fails_when_no_capacity_is_fast_enough() {
    let cluster = identical_servers(10, 1.0, 0.1);
    let err = bound_tuning(&cluster, 1e3, 0.7, BoundKind::Lower).unwrap_err();
    assert!(matches!(err, Error::RateUnattainable { .. } | Error::Unstable { .. }), "{err}");
}

#[test]
fn gpu_pool_bounds_at_moderate_load() {
    let cluster = gpu_pool_cluster(20, 0.2, 10);
    let t = bound_tuning(&cluster, 0.2, 0.7, BoundKind::Upper).unwrap();
    let p = t.curve.iter().find(|p| p.c == t.best_c).unwrap();
    assert!(p.lower_response.unwrap() <= p.upper_response.unwrap());
    assert!(t.best_response.is_finite());
}
