use crate::model::{Allocation, NetworkState, VarianceCost};
use crate::scalar::Scalar;

/// Splits `n` over paths with costs `base_k + slope * n_k` so that every
/// used path ends at the same level and unused ones start above it.
pub fn water_fill<S: Scalar>(bases: &[S], slope: S, n: S) -> Vec<S> {
    let mut order: Vec<usize> = (0..bases.len()).collect();
    order.sort_by(|&a, &b| bases[a].partial_cmp(&bases[b]).unwrap().then(a.cmp(&b)));
    let mut level = bases[order[0]] + slope * n;
    let mut acc = S::zero();
    for (j, &k) in order.iter().enumerate() {
        acc = acc + bases[k];
        let cand = (slope * n + acc) / S::from_count(j as u32 + 1);
        let next = order.get(j + 1).map(|&i| bases[i]);
        level = cand;
        if next.map_or(true, |b| cand <= b) {
            break;
        }
    }
    let mut out: Vec<S> = bases
        .iter()
        .map(|&b| ((level - b) / slope).max(S::zero()))
        .collect();
    // absorb rounding drift on the cheapest path
    let drift = n - out.iter().fold(S::zero(), |a, &b| a + b);
    out[order[0]] = (out[order[0]] + drift).max(S::zero());
    out
}

fn bases<S: Scalar>(state: &NetworkState<S>, v: &VarianceCost<S>) -> Vec<S> {
    (0..=state.m()).map(|i| state.free_cost(i, v)).collect()
}

/// Selfish equilibrium split for the current slot.
pub fn myopic_allocation<S: Scalar>(state: &NetworkState<S>, v: &VarianceCost<S>) -> Allocation<S> {
    let n = S::from_count(state.arrivals);
    if state.m() == 1 {
        let c0 = |k: S| state.path_cost(0, k, v);
        let c1 = |k: S| state.path_cost(1, k, v);
        let two = S::lit(2.0);
        let n1 = if c1(S::zero()) >= c0(n) {
            S::zero()
        } else if c1(n) <= c0(S::zero()) {
            n
        } else {
            n / two + (c0(S::zero()) - c1(S::zero())) / two
        };
        return Allocation::fractional(vec![n - n1, n1]);
    }
    Allocation::fractional(water_fill(&bases(state, v), S::one(), n))
}

/// Minimizer of the current slot's social cost alone.
pub fn one_shot_social<S: Scalar>(state: &NetworkState<S>, v: &VarianceCost<S>) -> Allocation<S> {
    let n = S::from_count(state.arrivals);
    Allocation::fractional(water_fill(&bases(state, v), S::lit(2.0), n))
}
