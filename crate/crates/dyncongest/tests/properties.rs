use dyncongest::analysis::{fig3_config, poa_bound_myopic, PoaParams};
use dyncongest::belief::{expected_alpha, hazard_prob, latency_update, posterior_update, Observation};
use dyncongest::lineargraph::{run_linear_episode, LinearGraphConfig};
use dyncongest::model::{
    immediate_costs, Allocation, Correlation, NetworkConfig, NetworkState, ObservationModel, PathBeliefState, QCurve,
    VarianceCost,
};
use dyncongest::policies::{
    char_posterior_check, myopic_allocation, CharParams, HidingPolicy, MdpConfig, MyopicPolicy, Planner, Policy,
    ValueFunction,
};
use dyncongest::sim::{run_episode, SimOptions};
use proptest::prelude::*;
use std::sync::OnceLock;

fn state(safe: f64, paths: &[(f64, f64, f64)], arrivals: u32) -> NetworkState<f64> {
    NetworkState {
        safe_latency: safe,
        paths: paths
            .iter()
            .map(|&(l, x, prev)| PathBeliefState {
                expected_latency: l,
                belief: x,
                last_count: prev,
            })
            .collect(),
        arrivals,
    }
}

fn path_strategy() -> impl Strategy<Value = (f64, f64, f64)> {
    (0.0..60.0f64, 0.0..=1.0f64, 0u32..8).prop_map(|(l, x, p)| (l, x, p as f64))
}

fn variance_strategy() -> impl Strategy<Value = VarianceCost<f64>> {
    prop_oneof![
        Just(VarianceCost::Zero),
        (0.5..50.0f64, 1.0..100.0f64).prop_map(|(a, b)| VarianceCost::CappedReciprocal { a, b }),
    ]
}

/// Fig. 3 network on a coarse grid, solved once.
fn solved() -> &'static ValueFunction {
    static VF: OnceLock<ValueFunction> = OnceLock::new();
    VF.get_or_init(|| {
        let net = fig3_config(0.9);
        let mdp = MdpConfig {
            belief_grid: 21,
            latency_step: 2.0,
            latency_max: 60.0,
            tolerance: 1e-7,
            ..MdpConfig::defaults(&net)
        };
        ValueFunction::solve(&net, &mdp).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn social_cost_is_the_flow_weighted_sum(
        safe in 0.0..50.0f64,
        paths in prop::collection::vec(path_strategy(), 1..4),
        shares in prop::collection::vec(0.0..10.0f64, 4),
        v in variance_strategy(),
    ) {
        let s = state(safe, &paths, 10);
        let counts: Vec<f64> = shares[..=paths.len()].to_vec();
        let (per, social) = immediate_costs(&s, &Allocation::fractional(counts.clone()), &v).unwrap();
        let direct: f64 = counts.iter().zip(&per).map(|(n, c)| n * c).sum();
        prop_assert_eq!(social, direct);
        for i in 0..=paths.len() {
            prop_assert!(s.path_cost(i, 2.0, &v) > s.path_cost(i, 1.0, &v));
        }
    }

    #[test]
    fn variance_cost_never_increases(v in variance_strategy(), a in 0.0..20.0f64, b in 0.0..20.0f64) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assert!(v.eval(lo) >= v.eval(hi));
    }

    #[test]
    fn detection_curves_are_monotone(mean in -3.0..3.0f64, var in 0.1..5.0f64, n in 1u32..40) {
        let obs = ObservationModel::gaussian(mean, var);
        prop_assert!(obs.q_high(n + 1) >= obs.q_high(n));
        prop_assert!(obs.q_low(n + 1) <= obs.q_low(n));
        prop_assert!(obs.q_low(n) <= obs.q_high(n) || obs.q_high(n) < 0.5);
    }

    #[test]
    fn belief_is_a_martingale(x in 0.0..=1.0f64, n in 1u32..60, a in 0.0..=1.0f64, b in 0.0..=1.0f64) {
        let obs = ObservationModel::constant(a.max(b), a.min(b));
        let p = hazard_prob(x, n, &obs);
        let m = p * posterior_update(x, n, Observation::Hazard, &obs)
            + (1.0 - p) * posterior_update(x, n, Observation::Clear, &obs);
        prop_assert!((m - x).abs() <= 1e-12, "{} vs {}", m, x);
    }

    #[test]
    fn reports_move_the_belief_the_right_way(x in 0.0..=1.0f64, n in 1u32..60, a in 0.0..=1.0f64, b in 0.0..=1.0f64) {
        prop_assume!(a != b);
        let obs = ObservationModel::constant(a.max(b), a.min(b));
        let up = posterior_update(x, n, Observation::Hazard, &obs);
        let down = posterior_update(x, n, Observation::Clear, &obs);
        prop_assert!(up >= x - 1e-15 && x <= 1.0 && down <= x + 1e-15, "{} {} {}", down, x, up);
        prop_assert_eq!(posterior_update(x, n, Observation::None, &obs), x);
    }

    #[test]
    fn more_observers_sharpen_hazard_reports(x in 0.01..0.99f64, n in 1u32..12) {
        let obs = ObservationModel::gaussian(0.3, 1.0);
        let a = posterior_update(x, n, Observation::Hazard, &obs);
        let b = posterior_update(x, n + 1, Observation::Hazard, &obs);
        prop_assert!(b >= a - 1e-12);
    }

    #[test]
    fn latency_update_is_monotone(
        l in 0.0..100.0f64, n in 0.0..10.0f64, x in 0.0..=1.0f64,
        dl in 0.0..10.0f64, dn in 0.0..3.0f64, dx in 0.0..0.5f64,
    ) {
        let hz = fig3_config(0.9).hazard;
        let f = Correlation::Linear;
        let base = latency_update(l, n, x, &hz, &f);
        prop_assert!(latency_update(l + dl, n, x, &hz, &f) >= base);
        prop_assert!(latency_update(l, n + dn, x, &hz, &f) >= base);
        prop_assert!(latency_update(l, n, (x + dx).min(1.0), &hz, &f) >= base);
    }

    #[test]
    fn myopic_split_is_an_equilibrium(
        safe in 0.0..50.0f64,
        paths in prop::collection::vec(path_strategy(), 1..5),
        arrivals in 1u32..30,
        v in variance_strategy(),
    ) {
        let s = state(safe, &paths, arrivals);
        let a = myopic_allocation(&s, &v);
        prop_assert!((a.total() - arrivals as f64).abs() < 1e-9);
        let cost: Vec<f64> = (0..=s.m()).map(|i| s.path_cost(i, a.counts[i], &v)).collect();
        let used: Vec<usize> = (0..=s.m()).filter(|&i| a.counts[i] > 1e-9).collect();
        let level = used.iter().map(|&i| cost[i]).fold(f64::NEG_INFINITY, f64::max);
        for &i in &used {
            prop_assert!((cost[i] - level).abs() <= 1e-9 * (1.0 + level.abs()), "{:?} {:?}", a.counts, cost);
        }
        for i in 0..=s.m() {
            if a.counts[i] <= 1e-9 {
                prop_assert!(cost[i] >= level - 1e-9 * (1.0 + level.abs()));
            }
        }
    }

    #[test]
    fn exploration_falls_with_belief_and_variance(x in 0.0..1.0f64, dx in 0.0..0.5f64, cap in 1.0..40.0f64, dcap in 0.0..40.0f64) {
        let net = fig3_config(0.9);
        let at = |x: f64, cap: f64| {
            let v = VarianceCost::CappedReciprocal { a: 10.0, b: cap };
            let s = state(net.safe_latency, &[(expected_alpha(x, &net.hazard) * 20.0, x, 0.0)], 5);
            myopic_allocation(&s, &v).counts[1]
        };
        let x2 = (x + dx).min(1.0);
        prop_assert!(at(x2, cap) <= at(x, cap) + 1e-9);
        prop_assert!(at(x, cap + dcap) <= at(x, cap) + 1e-9);

        let vf = solved();
        let n_star = |x: f64| {
            let mut s = net.initial_state(5);
            s.paths[0].belief = x;
            s.paths[0].expected_latency = expected_alpha(x, &net.hazard) * 20.0;
            vf.best(&s)[1]
        };
        prop_assert!(n_star(x2) <= n_star(x));
    }

    #[test]
    fn char_feasibility_is_incentive_compatibility(pm in 0.01..0.99f64, pl in 0.0..=1.0f64, ph in 0.001..=1.0f64) {
        let p = CharParams::new(0.5, pl, ph, pm);
        let (good, bad, ic) = char_posterior_check(&p).unwrap();
        prop_assert!((good + bad - 1.0).abs() < 1e-12);
        prop_assert_eq!(ic, p.is_feasible());
    }

    #[test]
    fn myopic_bound_grows_with_patience_and_shrinks_with_variance(
        rho in 0.05..0.98f64, drho in 0.0..0.019f64, cap in 0.0..20.0f64, dcap in 0.0..20.0f64,
    ) {
        let params = |rho: f64, cap: f64| PoaParams {
            rho,
            alpha_high: 1.5,
            m: 1,
            ell0: 100.0,
            n_min: 2.0,
            n_max: 2.0,
            variance: VarianceCost::CappedReciprocal { a: cap, b: cap },
        };
        let (psi, b) = poa_bound_myopic(&params(rho, cap)).unwrap();
        let (_, b_patient) = poa_bound_myopic(&params(rho + drho, cap)).unwrap();
        let (psi_noisy, b_noisy) = poa_bound_myopic(&params(rho, cap + dcap)).unwrap();
        prop_assert!(b_patient >= b - 1e-12);
        prop_assert!(psi_noisy <= psi + 1e-12 && b_noisy <= b + 1e-12);
        prop_assert!((1.0..2.0).contains(&b));
    }

    #[test]
    fn ledgers_add_up(seed in 0u64..1000, horizon in 1usize..40) {
        let net = fig3_config(0.9);
        let p = MyopicPolicy { config: net.clone() };
        let l = run_episode(&p, &net, &SimOptions::new(horizon, 0.9, seed)).unwrap();
        prop_assert!((l.recompute() - l.discounted_cost).abs() <= 1e-9 * (1.0 + l.discounted_cost.abs()));
        for r in &l.records {
            prop_assert_eq!(r.observations[0] == Observation::None, r.allocation[1] == 0.0);
        }
    }

    #[test]
    fn chain_cost_is_the_sum_of_its_hops(seed in 0u64..1000, k in 0usize..3) {
        let net = fig3_config(0.9);
        let g = LinearGraphConfig::repeated(&net, k);
        let p = HidingPolicy { config: net };
        let ps: Vec<&dyn Policy> = vec![&p; k + 1];
        let l = run_linear_episode(&ps, &g, &SimOptions::new(15, 0.9, seed)).unwrap();
        let sum: f64 = l.per_node.iter().map(|n| n.discounted_cost).sum();
        prop_assert!((sum - l.discounted_cost).abs() <= 1e-9 * (1.0 + sum));
    }
}

#[test]
fn value_grows_with_latency_belief_and_variance() {
    let vf = solved();
    let net: &NetworkConfig<f64> = &vf.network;
    let at = |vf: &ValueFunction, l: f64, x: f64| {
        let mut s = net.initial_state(5);
        s.paths[0].expected_latency = l;
        s.paths[0].belief = x;
        vf.value(&s)
    };
    let (lat, bel) = (&vf.latency.points, &vf.belief.points);
    for &x in bel {
        for w in lat.windows(2) {
            assert!(at(vf, w[1], x) >= at(vf, w[0], x) - 1e-6, "latency {} -> {} at x {x}", w[0], w[1]);
        }
    }
    for &l in lat {
        for w in bel.windows(2) {
            assert!(at(vf, l, w[1]) >= at(vf, l, w[0]) - 1e-6, "belief {} -> {} at l {l}", w[0], w[1]);
        }
    }

    let mut noisy = net.clone();
    noisy.variance = VarianceCost::CappedReciprocal { a: 20.0, b: 40.0 };
    let louder = ValueFunction::solve(&noisy, &vf.mdp).unwrap();
    for &l in lat.iter().step_by(3) {
        for &x in bel.iter().step_by(2) {
            assert!(at(&louder, l, x) >= at(vf, l, x) - 1e-6);
        }
    }
}

#[test]
fn contraction_never_exceeds_the_discount() {
    let vf = solved();
    assert!(vf.worst_contraction() <= vf.mdp.rho, "{}", vf.worst_contraction());
}

#[test]
fn detection_tables_keep_their_order() {
    let obs = ObservationModel {
        q_high: QCurve::Table { values: vec![0.6, 0.7, 0.9] },
        q_low: Some(QCurve::Table { values: vec![0.4, 0.2, 0.1] }),
    };
    obs.validate(10).unwrap();
}
