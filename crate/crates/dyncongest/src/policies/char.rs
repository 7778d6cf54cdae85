//! Combined hiding and probabilistic recommendation.

use super::hiding::{hiding_allocation, prior_free_cost};
use super::Planner;
use crate::error::{Error, Result};
use crate::model::{immediate_costs, largest_remainder, Allocation, NetworkConfig, NetworkState, Prior};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CharParams {
    pub x_th: f64,
    /// Recommendation probability of a path whose belief is below `x_th`.
    pub p_low: f64,
    /// Recommendation probability of a path at or above `x_th`.
    pub p_high: f64,
    /// Prior mass below the threshold.
    pub prior_mass_below: f64,
}

impl CharParams {
    pub fn new(x_th: f64, p_low: f64, p_high: f64, prior_mass_below: f64) -> Self {
        Self {
            x_th,
            p_low,
            p_high,
            prior_mass_below,
        }
    }

    /// Threshold mass read off the prior at `x_th`.
    pub fn from_prior(prior: &Prior<f64>, x_th: f64, p_low: f64, p_high: f64) -> Self {
        Self::new(x_th, p_low, p_high, prior.cdf(x_th))
    }

    /// `p_L P >= p_H (1 - P)`.
    pub fn is_feasible(&self) -> bool {
        let pm = self.prior_mass_below;
        self.p_low * pm >= self.p_high * (1.0 - pm)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("char.x_th", self.x_th),
            ("char.p_low", self.p_low),
            ("char.p_high", self.p_high),
            ("char.prior_mass_below", self.prior_mass_below),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(name, "must be a probability"));
            }
        }
        if !self.is_feasible() {
            return Err(Error::config(
                "char",
                format!(
                    "p_low * P = {} is below p_high * (1 - P) = {}",
                    self.p_low * self.prior_mass_below,
                    self.p_high * (1.0 - self.prior_mass_below)
                ),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Group {
    Hiding,
    Recommended,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Recommendation {
    pub path: usize,
    pub group: Group,
}

/// `Pr(pi = i)` for every path; index 0 carries the residual.
pub fn recommendation_probs(beliefs: &[f64], params: &CharParams) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(beliefs.len() + 1);
    out.push(0.0);
    for &x in beliefs {
        out.push(if x < params.x_th { params.p_low } else { params.p_high });
    }
    let residual = 1.0 - out[1..].iter().sum::<f64>();
    if residual < -1e-12 {
        return Err(Error::Infeasible(format!(
            "recommendation probabilities sum past one (safe residual {residual})"
        )));
    }
    out[0] = residual.max(0.0);
    Ok(out)
}

fn draw<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    0
}

/// One independent draw per recommendation-group user.
pub fn char_recommend<R: Rng + ?Sized>(
    state: &NetworkState<f64>,
    params: &CharParams,
    n_users: u32,
    rng: &mut R,
) -> Result<Vec<Recommendation>> {
    let beliefs: Vec<f64> = state.paths.iter().map(|p| p.belief).collect();
    let probs = recommendation_probs(&beliefs, params)?;
    Ok((0..n_users)
        .map(|_| Recommendation {
            path: draw(&probs, rng),
            group: Group::Recommended,
        })
        .collect())
}

/// Expected per-path counts when `n_hiding` of the arrivals follow the
/// hiding split and the rest follow recommendations.
pub fn char_expected_allocation(
    hiding: &Allocation<f64>,
    probs: &[f64],
    n_total: u32,
    n_hiding: u32,
) -> Allocation<f64> {
    let n = n_total as f64;
    let nh = n_hiding as f64;
    let counts = hiding
        .counts
        .iter()
        .zip(probs)
        .map(|(&h, &p)| if n > 0.0 { nh * h / n + (n - nh) * p } else { 0.0 })
        .collect();
    Allocation::fractional(counts)
}

/// Paths a recommended user may end up on: the recommendation itself,
/// unless the prior makes it dominated whatever the split, in which case
/// the user spreads evenly over the dominating paths.
pub fn obeyed_paths(config: &NetworkConfig<f64>, recommended: usize) -> Vec<usize> {
    let prior = &config.hazard.prior;
    let m = config.m() as f64;
    let n_max = config.arrivals.max as f64;
    if recommended == 0 {
        // stochastic paths cheaper than an empty safe path even when loaded
        let better: Vec<usize> = (0..config.m())
            .filter(|&i| prior_free_cost(prior, config, i) + n_max / m <= config.safe_latency)
            .map(|i| i + 1)
            .collect();
        return if better.is_empty() { vec![0] } else { better };
    }
    if prior_free_cost(prior, config, recommended - 1) >= config.safe_latency + n_max {
        return vec![0];
    }
    vec![recommended]
}

/// Pick the hiding-group size minimizing immediate cost plus discounted
/// continuation from `planner`; ties go to the smaller group.
pub fn char_optimize_hiding_count(
    state: &NetworkState<f64>,
    config: &NetworkConfig<f64>,
    planner: &dyn Planner,
    params: &CharParams,
) -> Result<(u32, Allocation<f64>)> {
    let n = state.arrivals;
    let beliefs: Vec<f64> = state.paths.iter().map(|p| p.belief).collect();
    let probs = effective_probs(config, &recommendation_probs(&beliefs, params)?);
    let hiding = hiding_allocation(&config.hazard.prior, n, config);
    let mut best: Option<(f64, u32, Allocation<f64>)> = None;
    for nh in 0..=n {
        let alloc = char_expected_allocation(&hiding, &probs, n, nh);
        let (_, imm) = immediate_costs(state, &alloc, &config.variance)?;
        let counts = largest_remainder(&alloc.counts, n);
        let q = imm + planner.rho() * planner.continuation(state, &counts);
        if best.as_ref().map_or(true, |(bq, _, _)| q < *bq - 1e-9 * (1.0 + bq.abs())) {
            best = Some((q, nh, alloc));
        }
    }
    let (_, nh, alloc) = best.expect("n >= 0 gives one candidate");
    Ok((nh, alloc))
}

/// Recommendation probabilities after the obedience rule reroutes
/// ignored recommendations.
pub fn effective_probs(config: &NetworkConfig<f64>, probs: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; probs.len()];
    for (i, &p) in probs.iter().enumerate() {
        let to = obeyed_paths(config, i);
        for &j in &to {
            out[j] += p / to.len() as f64;
        }
    }
    out
}

/// Posterior mass on `x < x_th` and on `x >= x_th` given a recommendation
/// to a stochastic path, and whether the first dominates.
pub fn char_posterior_check(params: &CharParams) -> Result<(f64, f64, bool)> {
    let pm = params.prior_mass_below;
    let good = pm * params.p_low;
    let bad = (1.0 - pm) * params.p_high;
    let den = good + bad;
    if den <= 0.0 {
        return Err(Error::UndefinedPosterior);
    }
    let g = good / den;
    let b = bad / den;
    Ok((g, b, g >= b))
}

/// Defaults that keep full recommendation below the bad-state optimum:
/// `N p_H < n*_bad` and `p_L` 0.05 past the feasibility boundary; both are
/// shrunk until the safe residual stays nonnegative.
pub fn default_char_params(
    prior: &Prior<f64>,
    x_th: f64,
    n_mean: f64,
    n_star_bad: f64,
    m: usize,
) -> CharParams {
    let pm = prior.cdf(x_th).clamp(1e-6, 1.0 - 1e-6);
    let cap = 1.0 / m as f64;
    let mut p_high = (0.9 * n_star_bad / n_mean.max(1e-9)).clamp(0.0, cap);
    let mut p_low = (p_high * (1.0 - pm) / pm + 0.05).min(cap);
    if p_low * pm < p_high * (1.0 - pm) {
        p_high = p_low * pm / (1.0 - pm) * (1.0 - 1e-9);
        p_low = (p_high * (1.0 - pm) / pm + 0.05).min(cap);
    }
    CharParams::new(x_th, p_low, p_high, pm)
}
