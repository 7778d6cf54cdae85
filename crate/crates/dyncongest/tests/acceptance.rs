//! Acceptance criteria, one test each. Every test writes a single
//! `PASS`/`FAIL` line straight to stderr (visible without `--nocapture`).
//! Outcomes are reported, not asserted, unless `DYNCONGEST_STRICT=1`.

use dyncongest::analysis::{poa_char, steady_state_exploration};
use dyncongest::belief::{hazard_prob, posterior_update, Observation};
use dyncongest::config::{bundled, ExperimentConfig};
use dyncongest::dynamics::outcome_branches;
use dyncongest::experiments::{hybrid_costs_by_policy, inefficiency_sweep, Workbench};
use dyncongest::lineargraph::{
    hiding_linear_allocation, linear_monte_carlo, myopic_linear_allocation, run_linear_episode, HybridConfig,
    LinearGraphConfig,
};
use dyncongest::model::{
    ArrivalModel, Correlation, HazardModel, NetworkConfig, NetworkState, ObservationModel, Prior, StochasticPath,
    VarianceCost,
};
use dyncongest::policies::{
    char_posterior_check, hiding_allocation, myopic_allocation, Axis, CharParams, MdpConfig, Policy, PolicyKind,
    ValueFunction,
};
use dyncongest::sim::{run_episode, SimOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::time::Instant;

fn report(name: &str, pass: bool, detail: String, started: Instant) {
    let line = format!(
        "{} {name}: {detail} [{:.1}s]\n",
        if pass { "PASS" } else { "FAIL" },
        started.elapsed().as_secs_f64()
    );
    // raw handle: libtest only captures the print macros
    let _ = std::io::stderr().write_all(line.as_bytes());
    if std::env::var("DYNCONGEST_STRICT").is_ok_and(|v| v == "1") {
        assert!(pass, "{name} failed");
    }
}

fn workbench(text: &str) -> Workbench {
    Workbench::from_config(&ExperimentConfig::from_json(text).unwrap()).unwrap()
}

#[test]
fn threshold_reproduction() {
    let t0 = Instant::now();
    let mut wb = workbench(bundled::FIG3);
    let r = wb.threshold(0.01).unwrap();
    let x = r.x_th.unwrap_or(f64::NAN);
    let pass = (0.2..=0.4).contains(&x) && r.sign_change_verified && t0.elapsed().as_secs() <= 120;
    report(
        "threshold",
        pass,
        format!("x_th = {x:.2}, sign structure verified = {}", r.sign_change_verified),
        t0,
    );
}

#[test]
fn belief_convergence() {
    let t0 = Instant::now();
    let mut wb = workbench(bundled::FIG5);
    // beliefs settle per run, so the spread across runs is Bernoulli(0.45)
    let runs = 1000;
    let social = wb.simulate(PolicyKind::Social, runs, 30, 5).unwrap();
    let myopic = wb.simulate(PolicyKind::Myopic, runs, 30, 5).unwrap();
    let xs = social.mean_belief_trace.last().unwrap()[0];
    let xm = myopic.mean_belief_trace.last().unwrap()[0];
    let pass = (xs - 0.45).abs() <= 0.05 && xm == 0.66 && t0.elapsed().as_secs() <= 300;
    report(
        "convergence",
        pass,
        format!("{runs} runs, T = 30: social mean belief {xs:.4}, myopic {xm}"),
        t0,
    );
}

#[test]
fn myopic_poa() {
    let t0 = Instant::now();
    let exp = ExperimentConfig::from_json(bundled::THEOREM1).unwrap();
    let mut rows = Vec::new();
    for (rho, ell0, horizon) in [(0.99, 50.0, 1500), (0.995, 150.0, 3000), (0.999, 500.0, 6000)] {
        let mut e = exp.clone();
        let n = e.network.as_mut().unwrap();
        n.rho = rho;
        n.safe_latency = ell0;
        let mut wb = Workbench::from_config(&e).unwrap();
        let r = wb.poa(PolicyKind::Myopic, PolicyKind::Social, 20, horizon, 11).unwrap();
        rows.push((rho, ell0, r.empirical_ratio, r.closed_form_bound.unwrap()));
    }
    let (_, _, r99, b99) = rows[0];
    let (_, _, r999, _) = rows[2];
    let pass = r99 >= 0.9 * b99 && r999 > 1.8 && t0.elapsed().as_secs() <= 300;
    let detail = rows
        .iter()
        .map(|(rho, l, r, b)| format!("rho {rho} l0 {l}: ratio {r:.3} vs bound {b:.4}"))
        .collect::<Vec<_>>()
        .join("; ");
    report("myopic_poa", pass, detail, t0);
}

#[test]
fn hiding_divergence() {
    let t0 = Instant::now();
    let exp = ExperimentConfig::from_json(bundled::HIDING_OVER).unwrap();
    let base = exp.network.as_ref().unwrap().paths[0].initial_latency;
    let ratios: Vec<f64> = (0..4)
        .map(|k| {
            let mut e = exp.clone();
            e.network.as_mut().unwrap().paths[0].initial_latency = base * 2f64.powi(k);
            let mut wb = Workbench::from_config(&e).unwrap();
            wb.poa(PolicyKind::Hiding, PolicyKind::Social, 20, 50, 3).unwrap().empirical_ratio
        })
        .collect();
    let growth: Vec<f64> = ratios.windows(2).map(|w| w[1] / w[0]).collect();
    let pass = growth.iter().all(|&g| g >= 1.8);
    report(
        "hiding_divergence",
        pass,
        format!("ratios {ratios:.3?}, growth per doubling {growth:.3?}"),
        t0,
    );
}

#[test]
fn char_poa() {
    let t0 = Instant::now();
    let exp = ExperimentConfig::from_json(bundled::CHAR_WORST).unwrap();

    let mut one = exp.clone();
    let n = one.network.as_mut().unwrap();
    n.paths.truncate(1);
    n.variance = VarianceCost::Zero;
    let r1 = Workbench::from_config(&one)
        .unwrap()
        .poa(PolicyKind::Char, PolicyKind::Social, 50, 200, 9)
        .unwrap();

    let mut wb = Workbench::from_config(&exp).unwrap();
    let r2 = wb.poa(PolicyKind::Char, PolicyKind::Social, 50, 200, 9).unwrap();
    let target2 = r2.closed_form_bound.unwrap();

    // algebra: the closed form substitutes c0(0) - ci(0) = N/M
    let mut worst: f64 = 0.0;
    for m in 1..=4usize {
        for k in 0..25 {
            let nbar = 2.0 + 4.0 * k as f64;
            let v = if k % 2 == 0 {
                VarianceCost::CappedReciprocal { a: 100.0, b: 200.0 }
            } else {
                VarianceCost::Zero
            };
            let s = steady_state_exploration(m, nbar, nbar / m as f64, &v);
            worst = worst.max((s.ratio() - poa_char(m, nbar, &v)).abs());
        }
    }

    let ok1 = (r1.empirical_ratio / 1.25 - 1.0).abs() <= 0.05;
    let ok2 = (r2.empirical_ratio / 1.0287 - 1.0).abs() <= 0.05;
    let ok3 = worst <= 1e-9;
    report(
        "char_poa",
        ok1 && ok2 && ok3,
        format!(
            "M=1 V=0 ratio {:.4} (target 1.25); M=2 ratio {:.4} (target {target2:.4}); \
             steady-state vs closed form max gap {worst:.3e}",
            r1.empirical_ratio, r2.empirical_ratio
        ),
        t0,
    );
}

#[test]
fn char_incentive_compatibility() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut feasible_ok, mut infeasible_ok) = (0, 0);
    let (mut feasible, mut infeasible) = (0, 0);
    while feasible < 1000 || infeasible < 1000 {
        let pm: f64 = rng.gen_range(0.01..0.99);
        let p_high: f64 = rng.gen_range(0.01..1.0);
        let boundary = p_high * (1.0 - pm) / pm;
        if rng.gen_bool(0.5) {
            if feasible == 1000 || boundary > 1.0 {
                continue;
            }
            let p = CharParams::new(0.5, rng.gen_range(boundary..=1.0), p_high, pm);
            feasible += 1;
            feasible_ok += char_posterior_check(&p).unwrap().2 as usize;
        } else {
            if infeasible == 1000 {
                continue;
            }
            let p_low = rng.gen_range(0.0..boundary.min(1.0)) * 0.999;
            let p = CharParams::new(0.5, p_low, p_high, pm);
            infeasible += 1;
            infeasible_ok += !char_posterior_check(&p).unwrap().2 as usize;
        }
    }
    report(
        "char_ic",
        feasible_ok == 1000 && infeasible_ok == 1000,
        format!("feasible ic=true {feasible_ok}/1000, infeasible ic=false {infeasible_ok}/1000"),
        t0,
    );
}

// ---------------------------------------------------------------------------
// MDP oracle

fn oracle_net() -> NetworkConfig<f64> {
    NetworkConfig {
        arrivals: ArrivalModel::constant(2),
        hazard: HazardModel {
            alpha_high: 1.5,
            alpha_low: 0.05,
            xbar_true: 0.45,
            prior: Prior::Point { value: 0.45 },
            transition: None,
        },
        observation: ObservationModel::gaussian(0.3, 1.0),
        variance: VarianceCost::CappedReciprocal { a: 10.0, b: 20.0 },
        correlation: Correlation::Linear,
        safe_latency: 10.0,
        paths: vec![StochasticPath {
            initial_count: 2,
            ..StochasticPath::new(3.0, 0.5)
        }],
        rho: 0.9,
    }
}

/// Written from the model equations, not the library.
struct Oracle {
    ell0: f64,
    rho: f64,
    n: u32,
}

impl Oracle {
    fn phi(z: f64) -> f64 {
        0.5 * statrs::function::erf::erfc(-z / std::f64::consts::SQRT_2)
    }
    fn q_h(n: u32) -> f64 {
        Self::phi(n as f64 - 0.3)
    }
    fn v(n_prev: u32) -> f64 {
        if n_prev == 0 {
            20.0
        } else {
            (10.0 / n_prev as f64).min(20.0)
        }
    }
    fn carry(x: f64, ell: f64, n: u32) -> f64 {
        (x * 1.5 + (1.0 - x) * 0.05) * (ell + n as f64)
    }

    /// Optimal cost of `slots` slots from `(ell, x, n_prev)`.
    fn value(&self, ell: f64, x: f64, n_prev: u32, slots: u32) -> f64 {
        if slots == 0 {
            return 0.0;
        }
        (0..=self.n)
            .map(|n1| {
                let n0 = self.n - n1;
                let imm = n0 as f64 * (self.ell0 + n0 as f64) + n1 as f64 * (ell + n1 as f64 + Self::v(n_prev));
                let next = if n1 == 0 {
                    self.value(Self::carry(x, ell, 0), x, 0, slots - 1)
                } else {
                    let (qh, ql) = (Self::q_h(n1), 1.0 - Self::q_h(n1));
                    let p1 = x * qh + (1.0 - x) * ql;
                    let x1 = x * qh / p1;
                    let x0 = x * (1.0 - qh) / (1.0 - p1);
                    p1 * self.value(Self::carry(x1, ell, n1), x1, n1, slots - 1)
                        + (1.0 - p1) * self.value(Self::carry(x0, ell, n1), x0, n1, slots - 1)
                };
                imm + self.rho * next
            })
            .fold(f64::INFINITY, f64::min)
    }
}

#[test]
fn mdp_oracle() {
    let t0 = Instant::now();
    let net = oracle_net();
    let s0: NetworkState<f64> = net.initial_state(2);

    // grid holds the start and every one-slot successor exactly
    let (mut lat, mut bel) = (vec![s0.paths[0].expected_latency], vec![s0.paths[0].belief]);
    for n1 in 0..=2u32 {
        for (_, s) in outcome_branches(&net, &s0, &[2 - n1, n1]) {
            lat.push(s.paths[0].expected_latency);
            bel.push(s.paths[0].belief);
        }
    }
    let mdp = MdpConfig {
        rho: net.rho,
        belief_grid: 2,
        latency_step: 1.0,
        latency_max: 1.0,
        max_iterations: 1,
        tolerance: 1e-300,
    };
    let vf = ValueFunction::solve_on(&net, &mdp, Axis::from_points(lat.clone()), Axis::from_points(bel.clone())).unwrap();
    let oracle = Oracle {
        ell0: net.safe_latency,
        rho: net.rho,
        n: 2,
    };
    let exact = oracle.value(3.0, 0.5, 2, 2);
    let got = vf.value(&s0);
    let gap = (got - exact).abs();

    // contraction on the same grid run to convergence
    let long = MdpConfig {
        max_iterations: 400,
        tolerance: 1e-12,
        ..mdp
    };
    let full = ValueFunction::solve_on(&net, &long, Axis::from_points(lat), Axis::from_points(bel)).unwrap();
    // successive sup-norm gaps, net of rounding at the table's scale
    let contraction = full.worst_contraction();

    report(
        "mdp_oracle",
        gap <= 1e-9 && contraction <= net.rho + 1e-12,
        format!(
            "T=2 value {got:.12} vs brute force {exact:.12} (gap {gap:.1e}); \
             worst contraction {contraction:.6} over {} sweeps (rho {})",
            full.gaps.len(),
            net.rho
        ),
        t0,
    );
}

#[test]
fn belief_martingale() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let x: f64 = rng.gen();
        let n: u32 = rng.gen_range(1..50);
        let a: f64 = rng.gen();
        let b: f64 = rng.gen();
        let obs = ObservationModel::constant(a.max(b), a.min(b));
        let p1 = hazard_prob(x, n, &obs);
        let m = p1 * posterior_update(x, n, Observation::Hazard, &obs)
            + (1.0 - p1) * posterior_update(x, n, Observation::Clear, &obs);
        worst = worst.max((m - x).abs());
    }
    report("belief_martingale", worst <= 1e-12, format!("max |E[post] - x| = {worst:.2e} over 10^4 draws"), t0);
}

#[test]
fn hybrid_reproduction() {
    let t0 = Instant::now();
    let mut cfg = HybridConfig::baseline();
    cfg.rho = 0.98;
    let s = hybrid_costs_by_policy(&cfg, 50, 30, 2024).unwrap();
    let c: Vec<f64> = s.iter().map(|x| x.mean_discounted_cost).collect();
    let (social, chr, myopic, hiding) = (c[0], c[1], c[2], c[3]);
    let ordered = social <= chr && chr <= myopic && myopic <= hiding;
    let ex = |v: f64| v / social - 1.0;
    let sweep = inefficiency_sweep(&cfg, &[0.999], 50, 30, 2024).unwrap();
    let top = &sweep[0];
    let pass = ordered
        && ex(chr) <= 0.10
        && ex(myopic) >= 0.50
        && ex(hiding) >= 0.80
        && top.ir_char < 1.15
        && top.ir_myopic > 1.5
        && t0.elapsed().as_secs() <= 600;
    report(
        "hybrid",
        pass,
        format!(
            "rho 0.98 excess over social: char {:+.1}%, myopic {:+.1}%, hiding {:+.1}% (ordered {ordered}); \
             rho 0.999: IR char {:.3}, IR myopic {:.3}",
            100.0 * ex(chr),
            100.0 * ex(myopic),
            100.0 * ex(hiding),
            top.ir_char,
            top.ir_myopic
        ),
        t0,
    );
}

#[test]
fn linear_graph_invariance() {
    let t0 = Instant::now();

    // k = 0 reduces to the parallel operations bit for bit
    let mut wb = workbench(bundled::FIG3);
    let cfg = wb.network().clone();
    let g = LinearGraphConfig::from_parallel(&cfg);
    let social = wb.policy(PolicyKind::Social).unwrap();
    let opts = SimOptions::new(30, cfg.rho, 5);
    let mut identical = true;
    for seed in 0..5 {
        let o = SimOptions { seed, ..opts.clone() };
        let a = run_episode(social.as_ref(), &cfg, &o).unwrap();
        let b = run_linear_episode(&[social.as_ref()], &g, &o).unwrap();
        identical &= a.records == b.per_node[0].records
            && a.discounted_cost.to_bits() == b.discounted_cost.to_bits()
            && a.belief_trace == b.per_node[0].belief_trace;
    }
    let st = g.initial_state(cfg.arrivals.max);
    identical &= myopic_linear_allocation(&g, &st).per_node[0] == myopic_allocation(&st[0], &cfg.variance);
    identical &= hiding_linear_allocation(&cfg.hazard.prior, &[5], &g)[0] == hiding_allocation(&cfg.hazard.prior, 5, &cfg);

    // per-subnetwork myopic/social on the myopic worst case
    let mut wb = workbench(bundled::THEOREM1);
    let net = wb.network().clone();
    let g = LinearGraphConfig::repeated(&net, 2);
    let my = wb.policy(PolicyKind::Myopic).unwrap();
    let so = wb.policy(PolicyKind::Social).unwrap();
    let o = SimOptions::new(700, net.rho, 17).with_truth(wb.spec.truth);
    let (a, _) = linear_monte_carlo(&[my.as_ref(), my.as_ref(), my.as_ref()], &g, 2000, &o).unwrap();
    let (b, _) = linear_monte_carlo(&[so.as_ref(), so.as_ref(), so.as_ref()], &g, 2000, &o).unwrap();
    let t1: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x.mean_discounted_cost / y.mean_discounted_cost).collect();
    let spread = t1.iter().copied().fold(f64::NEG_INFINITY, f64::max) / t1.iter().copied().fold(f64::INFINITY, f64::min) - 1.0;

    // per-subnetwork CHAR/social on the CHAR worst case
    let mut wb = workbench(bundled::CHAR_WORST);
    let net = wb.network().clone();
    let g = LinearGraphConfig::repeated(&net, 2);
    let ch = wb.policy(PolicyKind::Char).unwrap();
    let so = wb.policy(PolicyKind::Social).unwrap();
    let o = SimOptions::new(200, net.rho, 19).with_truth(wb.spec.truth);
    let chs: Vec<&dyn Policy> = vec![ch.as_ref(); 3];
    let sos: Vec<&dyn Policy> = vec![so.as_ref(); 3];
    let (a, _) = linear_monte_carlo(&chs, &g, 50, &o).unwrap();
    let (b, _) = linear_monte_carlo(&sos, &g, 50, &o).unwrap();
    let cr: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x.mean_discounted_cost / y.mean_discounted_cost).collect();

    let pass = identical && spread <= 0.05 && cr.iter().all(|&r| r <= 1.25 * 1.05);
    report(
        "linear_graph",
        pass,
        format!("k=0 identical {identical}; myopic/social per node {t1:.3?} (spread {:.2}%); CHAR/social per node {cr:.4?}", 100.0 * spread),
        t0,
    );
}
