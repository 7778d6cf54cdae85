use crate::belief::latency_update;
use crate::model::{Allocation, NetworkConfig, Prior};
use crate::scalar::Scalar;

/// Free-flow cost of stochastic path `i` (0-based) as an uninformed user
/// prices it: nominal latency carried through the latency map under the
/// prior mean, plus the variance term at the path's configured last count
/// (the cap when that count is zero).
pub fn prior_free_cost<S: Scalar>(prior: &Prior<S>, config: &NetworkConfig<S>, i: usize) -> S {
    let p = &config.paths[i];
    // the expected map is affine in x, so the prior enters through its mean
    let ell = latency_update(p.nominal(), S::zero(), prior.mean(), &config.hazard, &config.correlation);
    ell + config.variance.eval(S::from_count(p.initial_count))
}

/// Constant split followed by users who see nothing but the prior.
pub fn hiding_allocation<S: Scalar>(prior: &Prior<S>, n_t: u32, config: &NetworkConfig<S>) -> Allocation<S> {
    let m = S::from_count(config.m() as u32);
    let n = S::from_count(n_t);
    let c0 = config.safe_latency;
    let mut counts = vec![S::zero(); config.m() + 1];
    for i in 0..config.m() {
        let ci = prior_free_cost(prior, config, i);
        let interior = (config.arrivals.mean + c0 - ci) / (m + S::one());
        counts[i + 1] = (n / m).min(interior).max(S::zero());
    }
    let used = counts.iter().fold(S::zero(), |a, &b| a + b);
    counts[0] = (n - used).max(S::zero());
    Allocation::fractional(counts)
}

/// Private deterministic recommendations with many arrivals carry no
/// information beyond the prior, so users land on the hiding split.
pub fn deterministic_recommendation_allocation<S: Scalar>(
    prior: &Prior<S>,
    n_t: u32,
    config: &NetworkConfig<S>,
) -> Allocation<S> {
    hiding_allocation(prior, n_t, config)
}
