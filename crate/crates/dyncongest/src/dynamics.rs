//! One-slot platform transition: Bayes update, latency carry-over, and the
//! between-slot belief step (identity for parallel networks, the Markov
//! chain when the hazard model carries one).

use crate::belief::{belief_transition, hazard_prob, latency_update, posterior_update, Observation};
use crate::model::{NetworkConfig, NetworkState, PathBeliefState};
use crate::scalar::Scalar;

/// Path state after `n` travellers reported `y`.
pub fn advance_path<S: Scalar>(
    cfg: &NetworkConfig<S>,
    p: &PathBeliefState<S>,
    n: u32,
    y: Observation,
) -> PathBeliefState<S> {
    let x_post = posterior_update(p.belief, n, y, &cfg.observation);
    let ell = latency_update(p.expected_latency, S::from_count(n), x_post, &cfg.hazard, &cfg.correlation);
    let belief = match &cfg.hazard.transition {
        Some(tm) => belief_transition(x_post, tm),
        None => x_post,
    };
    PathBeliefState {
        expected_latency: ell,
        belief,
        last_count: S::from_count(n),
    }
}

/// Possible report outcomes for one path with their predictive probability.
pub fn path_outcomes<S: Scalar>(
    cfg: &NetworkConfig<S>,
    p: &PathBeliefState<S>,
    n: u32,
) -> Vec<(S, PathBeliefState<S>)> {
    if n == 0 {
        return vec![(S::one(), advance_path(cfg, p, 0, Observation::None))];
    }
    let h = hazard_prob(p.belief, n, &cfg.observation);
    let mut out = Vec::with_capacity(2);
    if h > S::zero() {
        out.push((h, advance_path(cfg, p, n, Observation::Hazard)));
    }
    if h < S::one() {
        out.push((S::one() - h, advance_path(cfg, p, n, Observation::Clear)));
    }
    out
}

/// Joint report outcomes across paths (independent given beliefs); the
/// arrival count of each successor is left at `state.arrivals`.
pub fn outcome_branches<S: Scalar>(
    cfg: &NetworkConfig<S>,
    state: &NetworkState<S>,
    counts: &[u32],
) -> Vec<(S, NetworkState<S>)> {
    let mut acc: Vec<(S, Vec<PathBeliefState<S>>)> = vec![(S::one(), Vec::with_capacity(state.m()))];
    for (i, p) in state.paths.iter().enumerate() {
        let outs = path_outcomes(cfg, p, counts[i + 1]);
        let mut next = Vec::with_capacity(acc.len() * outs.len());
        for (w, prefix) in &acc {
            for (q, np) in &outs {
                let mut v = prefix.clone();
                v.push(np.clone());
                next.push((*w * *q, v));
            }
        }
        acc = next;
    }
    acc.into_iter()
        .map(|(w, paths)| {
            (
                w,
                NetworkState {
                    safe_latency: state.safe_latency,
                    paths,
                    arrivals: state.arrivals,
                },
            )
        })
        .collect()
}

/// Integer compositions of `n` into `parts` nonnegative parts, ordered
/// lexicographically.
pub fn compositions(n: u32, parts: usize) -> Vec<Vec<u32>> {
    fn rec(n: u32, parts: usize, prefix: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if parts == 1 {
            prefix.push(n);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for k in 0..=n {
            prefix.push(k);
            rec(n - k, parts - 1, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    if parts == 0 {
        return out;
    }
    rec(n, parts, &mut Vec::with_capacity(parts), &mut out);
    out
}

/// Compositions where every part except the first is a multiple of `step`.
pub fn coarse_compositions(n: u32, parts: usize, step: u32) -> Vec<Vec<u32>> {
    if step <= 1 {
        return compositions(n, parts);
    }
    let units = n / step;
    compositions(units, parts)
        .into_iter()
        .map(|c| {
            let mut v: Vec<u32> = c.iter().map(|k| k * step).collect();
            let used: u32 = v[1..].iter().sum();
            v[0] = n - used;
            v
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn composition_counts() {
        assert_eq!(compositions(2, 2), vec![vec![0, 2], vec![1, 1], vec![2, 0]]);
        assert_eq!(compositions(10, 3).len(), 66);
        for c in coarse_compositions(11, 3, 2) {
            assert_eq!(c.iter().sum::<u32>(), 11);
            assert!(c[1] % 2 == 0 && c[2] % 2 == 0);
        }
    }
}
