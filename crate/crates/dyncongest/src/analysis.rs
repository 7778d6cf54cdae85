//! Price-of-anarchy bounds and empirical ratios, the exploration threshold,
//! worst-case scenario constructions, steady-state formulas and
//! convergence diagnostics.

use crate::belief::expected_alpha;
use crate::error::{Error, Result};
use crate::lineargraph::HybridConfig;
use crate::model::{
    ArrivalModel, Correlation, HazardModel, NetworkConfig, ObservationModel, Prior, StochasticPath, VarianceCost,
};
use crate::policies::hiding::prior_free_cost;
use crate::policies::{myopic_allocation, Planner, Policy};
use crate::sim::{monte_carlo, MonteCarloSummary, SimOptions, TruthMode};
use serde::{Deserialize, Serialize};
use std::io::Write;

/// Inputs of the myopic lower bound.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoaParams {
    pub rho: f64,
    pub alpha_high: f64,
    pub m: usize,
    pub ell0: f64,
    pub n_min: f64,
    pub n_max: f64,
    pub variance: VarianceCost<f64>,
}

/// `(psi, bound)` for the myopic policy's worst case.
pub fn poa_bound_myopic(p: &PoaParams) -> Result<(f64, f64)> {
    if p.alpha_high <= 1.0 {
        return Err(Error::Infeasible("alpha_high must exceed 1".into()));
    }
    if p.m == 0 || p.n_max <= 0.0 {
        return Err(Error::Infeasible("need M >= 1 and N_max > 0".into()));
    }
    let m = p.m as f64;
    let slack = p.ell0 - p.n_min / m - p.variance.eval(p.n_min / m);
    let arg = m * slack * (p.alpha_high - 1.0) / (p.alpha_high * p.n_max) + 1.0;
    if arg <= 0.0 || slack <= 0.0 {
        return Err(Error::Infeasible(format!(
            "safe latency {} leaves no room above N_min/M + V(N_min/M)",
            p.ell0
        )));
    }
    let psi = 1.0 + arg.ln() / p.alpha_high.ln();
    let rp = p.rho.powf(psi);
    let bound = 2.0 * (1.0 - rp) / (2.0 - p.rho - rp);
    Ok((psi, bound))
}

/// Worst-case CHAR ratio for `m` stochastic paths and mean arrivals `n_mean`.
pub fn poa_char(m: usize, n_mean: f64, v: &VarianceCost<f64>) -> f64 {
    let m = m as f64;
    let n_hat = n_mean * (2.0 * m + 1.0) / (2.0 * m * (m + 1.0));
    1.0 + 1.0 / (2.0 * (m + 1.0) * (1.0 + m / n_mean * v.eval(n_hat)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SteadyState {
    pub n_char: f64,
    pub n_star_path: f64,
    pub n_star_safe: f64,
    /// Free-flow cost of a stochastic path, `n_star_path + V(n_star_path)`.
    pub c_path: f64,
    pub cost_char: f64,
    pub cost_star: f64,
}

impl SteadyState {
    pub fn ratio(&self) -> f64 {
        self.cost_char / self.cost_star
    }
}

/// Long-run exploration under CHAR's worst case and under the optimum,
/// with the per-slot costs in closed form. The stochastic free-flow cost
/// is the one that turns the ratio into [`poa_char`]'s argument of `V`.
pub fn steady_state_exploration(m: usize, n_mean: f64, c0_minus_ci: f64, v: &VarianceCost<f64>) -> SteadyState {
    let mf = m as f64;
    let n_char = n_mean / mf;
    let n_star_path = n_mean / (mf + 1.0) + c0_minus_ci / (2.0 * (mf + 1.0));
    let n_star_safe = n_mean / (2.0 * (mf + 1.0));
    let n_hat = n_mean * (2.0 * mf + 1.0) / (2.0 * mf * (mf + 1.0));
    let ci = n_hat + v.eval(n_hat);
    let c0 = ci + c0_minus_ci;
    let cost_char = n_mean * (ci + n_char);
    let cost_star = n_mean / (2.0 * (mf + 1.0)) * (c0 + ci) + mf / (mf + 1.0) * n_mean * ci;
    SteadyState {
        n_char,
        n_star_path,
        n_star_safe,
        c_path: ci,
        cost_char,
        cost_star,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPoint {
    pub x: f64,
    pub n_myopic: f64,
    pub n_social: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdReport {
    /// First grid belief where myopic exploration falls below the optimum.
    pub x_th: Option<f64>,
    pub grid: Vec<ThresholdPoint>,
    /// Myopic explores at least as much below `x_th` and strictly less from
    /// `x_th` on.
    pub sign_change_verified: bool,
    /// `n* - n^(m)` never decreases along the grid (one user of slack).
    pub monotone_difference: bool,
    pub min_difference: f64,
    pub max_difference: f64,
}

impl ThresholdReport {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["x", "n_myopic", "n_social"])?;
        for p in &self.grid {
            out.write_record([p.x.to_string(), p.n_myopic.to_string(), p.n_social.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Sweeps the belief of the single stochastic path over `[0, 1)` in steps of
/// `grid_step`. At belief `x` the path's expected latency is
/// `E[alpha | x]` times its configured initial latency and the previous
/// count is the configured one; arrivals are rounded mean arrivals.
pub fn find_threshold_xth(config: &NetworkConfig<f64>, planner: &dyn Planner, grid_step: f64) -> Result<ThresholdReport> {
    if config.m() != 1 {
        return Err(Error::InvalidInput("threshold search needs exactly one stochastic path".into()));
    }
    if !(grid_step > 0.0 && grid_step < 1.0) {
        return Err(Error::config("grid_step", "must lie in (0, 1)"));
    }
    let n = config.arrivals.mean.round() as u32;
    let base = config.paths[0].initial_latency;
    let steps = (1.0 / grid_step).ceil() as usize;
    let grid: Vec<ThresholdPoint> = (0..steps)
        .map(|k| k as f64 * grid_step)
        .filter(|&x| x < 1.0)
        .map(|x| {
            let mut s = config.initial_state(n);
            s.paths[0].belief = x;
            s.paths[0].expected_latency = expected_alpha(x, &config.hazard) * base;
            ThresholdPoint {
                x,
                n_myopic: myopic_allocation(&s, &config.variance).counts[1],
                n_social: planner.best(&s)[1] as f64,
            }
        })
        .collect();
    let diff: Vec<f64> = grid.iter().map(|p| p.n_social - p.n_myopic).collect();
    let first = grid.iter().position(|p| p.n_myopic < p.n_social);
    let sign_change_verified = match first {
        Some(k) if k > 0 => diff[..k].iter().all(|&d| d <= 0.0) && diff[k..].iter().all(|&d| d > 0.0),
        _ => false,
    };
    // integer optimum against fractional myopic: allow one user of slack
    let monotone_difference = diff.windows(2).all(|w| w[1] >= w[0] - 1.0);
    Ok(ThresholdReport {
        x_th: first.map(|k| grid[k].x),
        min_difference: diff.iter().copied().fold(f64::INFINITY, f64::min),
        max_difference: diff.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        grid,
        sign_change_verified,
        monotone_difference,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Theorem1Worst,
    HidingOver,
    HidingUnder,
    CharWorst,
    Fig3,
    Fig5,
    Fig7,
    Fig8,
}

impl ScenarioKind {
    pub fn label(self) -> &'static str {
        match self {
            ScenarioKind::Theorem1Worst => "theorem1_worst",
            ScenarioKind::HidingOver => "hiding_over",
            ScenarioKind::HidingUnder => "hiding_under",
            ScenarioKind::CharWorst => "char_worst",
            ScenarioKind::Fig3 => "fig3",
            ScenarioKind::Fig5 => "fig5",
            ScenarioKind::Fig7 => "fig7",
            ScenarioKind::Fig8 => "fig8",
        }
    }
}

impl std::str::FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.replace('-', "_")))
            .map_err(|_| Error::InvalidInput(format!("unknown scenario `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "network", rename_all = "snake_case")]
pub enum ScenarioNetwork {
    Parallel(NetworkConfig<f64>),
    Hybrid(HybridConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    pub network: ScenarioNetwork,
    pub truth: TruthMode,
    /// Parameters of the closed-form bound, where the construction has one.
    pub bound: Option<PoaParams>,
}

impl ScenarioSpec {
    pub fn parallel(&self) -> Result<&NetworkConfig<f64>> {
        match &self.network {
            ScenarioNetwork::Parallel(c) => Ok(c),
            ScenarioNetwork::Hybrid(_) => Err(Error::InvalidInput(format!(
                "scenario `{}` is a hybrid network",
                self.kind.label()
            ))),
        }
    }

    pub fn closed_form(&self, rho: f64) -> Option<(f64, f64)> {
        let mut p = self.bound.clone()?;
        p.rho = rho;
        poa_bound_myopic(&p).ok()
    }
}

/// Single-path threshold setting.
pub fn fig3_config(rho: f64) -> NetworkConfig<f64> {
    let mut p = StochasticPath::new(20.0, 0.3);
    p.initial_count = 5;
    NetworkConfig {
        arrivals: ArrivalModel::constant(5),
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
        safe_latency: 15.0,
        paths: vec![p],
        rho,
    }
}

/// Single-path convergence setting.
pub fn fig5_config() -> NetworkConfig<f64> {
    NetworkConfig {
        arrivals: ArrivalModel::constant(7),
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
        safe_latency: 100.0,
        paths: vec![StochasticPath::new(110.0, 0.66)],
        rho: 0.99,
    }
}

fn infeasible(kind: ScenarioKind, why: impl std::fmt::Display) -> Error {
    Error::Infeasible(format!("{}: {why}", kind.label()))
}

/// Instantiates a worst-case construction on top of `base`. The figure
/// kinds ignore `base` and return the bundled settings.
pub fn build_scenario(kind: ScenarioKind, base: &NetworkConfig<f64>) -> Result<ScenarioSpec> {
    base.validate()?;
    let m = base.m() as f64;
    let n_max = base.arrivals.max as f64;
    let n_min = base.arrivals.min as f64;
    let mut c = base.clone();
    let mut bound = None;
    match kind {
        ScenarioKind::Theorem1Worst => {
            // E[alpha] = 1 at the start keeps the myopic latency frozen
            let ah = c.hazard.alpha_high;
            if ah <= 1.0 {
                return Err(infeasible(kind, "alpha_high must exceed 1"));
            }
            c.hazard.alpha_low = 0.0;
            c.hazard.xbar_true = 0.0;
            for p in &mut c.paths {
                let ell = c.safe_latency + n_max - c.variance.eval(p.initial_count as f64);
                if ell < 0.0 {
                    return Err(infeasible(kind, "variance cap exceeds safe cost at N_max"));
                }
                p.initial_belief = 1.0 / ah;
                p.initial_latency = ell;
                p.xbar_true = None;
            }
            let params = PoaParams {
                rho: c.rho,
                alpha_high: ah,
                m: c.m(),
                ell0: c.safe_latency,
                n_min,
                n_max,
                variance: c.variance.clone(),
            };
            poa_bound_myopic(&params).map_err(|e| infeasible(kind, e))?;
            bound = Some(params);
        }
        ScenarioKind::HidingOver => {
            // uninformed users see a cheap path that is in fact congested;
            // what they price is the nominal latency, free flow unless given
            for p in &mut c.paths {
                p.nominal_latency.get_or_insert(0.0);
            }
            let mut need: f64 = 0.0;
            for i in 0..c.m() {
                let ec = prior_free_cost(&c.hazard.prior, &c, i);
                need = need.max(ec + n_max / m).max(ec + n_max * (m + 1.0) / m - c.arrivals.mean);
            }
            c.safe_latency = c.safe_latency.max(need);
            c.hazard.xbar_true = 1.0;
            for p in &mut c.paths {
                p.xbar_true = None;
                if p.initial_latency <= c.safe_latency {
                    return Err(infeasible(kind, "initial stochastic latency must exceed the safe latency"));
                }
                if expected_alpha(p.initial_belief, &c.hazard) <= 1.0 {
                    return Err(infeasible(kind, "initial belief must make latency grow"));
                }
            }
        }
        ScenarioKind::HidingUnder => {
            // uninformed users shun a path that is in fact nearly free
            let abar = expected_alpha(c.hazard.prior.mean(), &c.hazard);
            if abar <= 0.0 || matches!(c.correlation, Correlation::Static) {
                return Err(infeasible(kind, "prior latency map must respond to the nominal latency"));
            }
            c.hazard.xbar_true = 0.0;
            let target = c.safe_latency + n_max + 1.0;
            for p in &mut c.paths {
                let v0 = c.variance.eval(p.initial_count as f64);
                p.nominal_latency = Some(((target - v0) / abar).max(0.0));
                p.initial_latency = p.initial_latency.min(c.safe_latency / 10.0);
                p.initial_belief = 0.0;
                p.xbar_true = None;
            }
            for i in 0..c.m() {
                if prior_free_cost(&c.hazard.prior, &c, i) <= c.safe_latency + n_max {
                    return Err(infeasible(kind, "variance cap keeps the prior cost below c_0(N_max)"));
                }
            }
        }
        ScenarioKind::CharWorst => {
            // constant arrivals and frozen latency: every slot is the same game
            let n_bar = base.arrivals.mean.round() as u32;
            if n_bar == 0 || n_bar % c.m() as u32 != 0 {
                return Err(infeasible(kind, "mean arrivals must be a positive multiple of M"));
            }
            let share = n_bar / c.m() as u32;
            c.arrivals = ArrivalModel::constant(n_bar);
            c.correlation = Correlation::Static;
            let ci0 = c.variance.eval(share as f64);
            c.safe_latency = ci0 + share as f64;
            for p in &mut c.paths {
                p.initial_latency = 0.0;
                p.nominal_latency = None;
                p.initial_count = share;
            }
            for i in 0..c.m() {
                if prior_free_cost(&c.hazard.prior, &c, i) + share as f64 > c.safe_latency + 1e-9 {
                    return Err(infeasible(kind, "stochastic paths do not dominate the safe path"));
                }
            }
        }
        ScenarioKind::Fig3 => c = fig3_config(0.9),
        ScenarioKind::Fig5 => c = fig5_config(),
        ScenarioKind::Fig7 | ScenarioKind::Fig8 => {
            return Ok(ScenarioSpec {
                kind,
                network: ScenarioNetwork::Hybrid(HybridConfig::baseline()),
                truth: TruthMode::Markov,
                bound: None,
            });
        }
    }
    c.validate()?;
    Ok(ScenarioSpec {
        kind,
        truth: TruthMode::for_config(&c),
        network: ScenarioNetwork::Parallel(c),
        bound,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoAReport {
    pub scenario: String,
    pub policy: String,
    pub reference: String,
    pub psi: Option<f64>,
    pub closed_form_bound: Option<f64>,
    pub empirical_ratio: f64,
    pub mean_cost: f64,
    pub reference_cost: f64,
    pub std_error: f64,
    pub reference_std_error: f64,
    pub runs: usize,
    pub horizon: usize,
    pub rho: f64,
}

impl PoAReport {
    /// Ratio against another cost pair, used for the hybrid experiments.
    pub fn from_summaries(
        scenario: &str,
        a: &MonteCarloSummary,
        reference: &MonteCarloSummary,
        horizon: usize,
        rho: f64,
    ) -> Result<Self> {
        if reference.mean_discounted_cost.abs() < 1e-12 {
            return Err(Error::DegenerateRatio(reference.mean_discounted_cost));
        }
        Ok(PoAReport {
            scenario: scenario.to_string(),
            policy: a.policy_name.clone(),
            reference: reference.policy_name.clone(),
            psi: None,
            closed_form_bound: None,
            empirical_ratio: a.mean_discounted_cost / reference.mean_discounted_cost,
            mean_cost: a.mean_discounted_cost,
            reference_cost: reference.mean_discounted_cost,
            std_error: a.std_error(),
            reference_std_error: reference.std_error(),
            runs: a.runs,
            horizon,
            rho,
        })
    }
}

/// Mean discounted cost of `policy` over that of `reference`, both run on
/// the same seeds.
pub fn empirical_poa(
    policy: &dyn Policy,
    reference: &dyn Policy,
    scenario: &ScenarioSpec,
    runs: usize,
    horizon: usize,
    rho: f64,
    seed: u64,
) -> Result<PoAReport> {
    let mut cfg = scenario.parallel()?.clone();
    if rho < 1.0 {
        cfg.rho = rho;
    }
    let opts = SimOptions::new(horizon, rho, seed).with_truth(scenario.truth);
    let a = monte_carlo(policy, &cfg, runs, &opts)?;
    let b = monte_carlo(reference, &cfg, runs, &opts)?;
    let mut r = PoAReport::from_summaries(scenario.kind.label(), &a, &b, horizon, rho)?;
    if let Some((psi, bound)) = scenario.closed_form(rho) {
        r.psi = Some(psi);
        r.closed_form_bound = Some(bound);
    }
    Ok(r)
}

/// `scenario, policy, reference, psi, bound, empirical_ratio, runs, horizon, rho, above_bound`.
pub fn write_poa_csv<W: Write>(w: W, reports: &[PoAReport]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "scenario",
        "policy",
        "reference",
        "psi",
        "bound",
        "empirical_ratio",
        "runs",
        "horizon",
        "rho",
        "above_bound",
    ])?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for r in reports {
        out.write_record([
            r.scenario.clone(),
            r.policy.clone(),
            r.reference.clone(),
            opt(r.psi),
            opt(r.closed_form_bound),
            r.empirical_ratio.to_string(),
            r.runs.to_string(),
            r.horizon.to_string(),
            r.rho.to_string(),
            r.closed_form_bound
                .map_or(String::new(), |b| (r.empirical_ratio >= b).to_string()),
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub final_mean_belief: Vec<f64>,
    pub target_xbar: f64,
    pub converged: bool,
    /// Per slot, per path mean belief.
    pub trace: Vec<Vec<f64>>,
}

/// Compares the mean belief in the last traced slot with `xbar_true`.
pub fn convergence_diagnostics(summary: &MonteCarloSummary, xbar_true: f64, tolerance: f64) -> ConvergenceReport {
    let last = summary.mean_belief_trace.last().cloned().unwrap_or_default();
    ConvergenceReport {
        converged: !last.is_empty() && last.iter().all(|x| (x - xbar_true).abs() <= tolerance),
        final_mean_belief: last,
        target_xbar: xbar_true,
        trace: summary.mean_belief_trace.clone(),
    }
}
