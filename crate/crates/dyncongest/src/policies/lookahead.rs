//! Receding-horizon planning: exhaustive (or coarse) search at the root,
//! a few rule-based candidates deeper down, and a certainty-equivalent
//! rollout of the best rule as the leaf value.

use super::mdp::prefer;
use super::myopic::{myopic_allocation, one_shot_social};
use super::Planner;
use crate::dynamics::{advance_path, coarse_compositions, compositions, outcome_branches};
use crate::belief::Observation;
use crate::model::{immediate_costs, largest_remainder, Allocation, NetworkConfig, NetworkState};
use serde::{Deserialize, Serialize};

/// A discounted routing problem the planner can search.
pub trait Game: Send + Sync {
    type State: Clone + Send + Sync;

    fn rho(&self) -> f64;
    fn arrivals(&self, s: &Self::State) -> u32;
    /// Arrival count assumed for slots after the current one.
    fn planning_arrivals(&self) -> u32;
    fn with_arrivals(&self, s: &Self::State, n: u32) -> Self::State;
    fn immediate(&self, s: &Self::State, counts: &[u32]) -> f64;
    /// Report outcomes with probabilities; arrivals left unchanged.
    fn branches(&self, s: &Self::State, counts: &[u32]) -> Vec<(f64, Self::State)>;
    /// Successor with every report replaced by its expectation.
    fn mean_next(&self, s: &Self::State, counts: &[u32]) -> Self::State;
    fn root_actions(&self, s: &Self::State, max_actions: usize) -> Vec<Vec<u32>>;
    /// Rule-based splits; the first `rules()` entries are the rollout rules
    /// in a fixed order.
    fn candidates(&self, s: &Self::State) -> Vec<Vec<u32>>;
    fn rules(&self) -> usize;
    /// Split chosen by rollout rule `k`.
    fn rule_action(&self, s: &Self::State, k: usize) -> Vec<u32> {
        self.candidates(s).swap_remove(k)
    }
    /// Tie-break key: larger is explored first.
    fn beliefs(&self, s: &Self::State) -> Vec<f64>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LookaheadConfig {
    /// Decision levels searched with report branching (root included).
    pub depth: usize,
    /// Upper bound on root actions; larger sets are coarsened.
    pub max_root_actions: usize,
    /// Rollout length; the remaining tail is priced at the last slot's cost.
    pub rollout: usize,
}

impl Default for LookaheadConfig {
    fn default() -> Self {
        Self {
            depth: 3,
            max_root_actions: 400,
            rollout: 60,
        }
    }
}

pub struct Lookahead<G: Game> {
    pub game: G,
    pub config: LookaheadConfig,
}

impl<G: Game> Lookahead<G> {
    pub fn new(game: G, config: LookaheadConfig) -> Self {
        Self { game, config }
    }

    fn rollout_rule(&self, s: &G::State, rule: usize) -> f64 {
        let rho = self.game.rho();
        let mut s = s.clone();
        let mut total = 0.0;
        let mut disc = 1.0;
        let mut last = 0.0;
        for _ in 0..self.config.rollout {
            let a = self.game.rule_action(&s, rule);
            last = self.game.immediate(&s, &a);
            total += disc * last;
            disc *= rho;
            s = self.game.mean_next(&s, &a);
        }
        if rho < 1.0 {
            total += disc * last / (1.0 - rho);
        }
        total
    }

    /// Leaf value: the best rule's certainty-equivalent rollout.
    pub fn terminal(&self, s: &G::State) -> f64 {
        (0..self.game.rules())
            .map(|k| self.rollout_rule(s, k))
            .fold(f64::INFINITY, f64::min)
    }

    fn value(&self, s: &G::State, depth: usize) -> f64 {
        if depth == 0 {
            return self.terminal(s);
        }
        let mut acts = self.game.candidates(s);
        acts.sort();
        acts.dedup();
        acts.iter()
            .map(|a| self.game.immediate(s, a) + self.game.rho() * self.expected(s, a, depth - 1))
            .fold(f64::INFINITY, f64::min)
    }

    fn expected(&self, s: &G::State, counts: &[u32], depth: usize) -> f64 {
        let n = self.game.planning_arrivals();
        self.game
            .branches(s, counts)
            .into_iter()
            .map(|(p, next)| p * self.value(&self.game.with_arrivals(&next, n), depth))
            .sum()
    }

    pub fn continuation_at(&self, s: &G::State, counts: &[u32]) -> f64 {
        self.expected(s, counts, self.config.depth.saturating_sub(1))
    }

    pub fn best_action(&self, s: &G::State) -> Vec<u32> {
        let beliefs = self.game.beliefs(s);
        let mut acts = self.game.root_actions(s, self.config.max_root_actions);
        acts.extend(self.game.candidates(s));
        acts.sort();
        acts.dedup();
        let mut best: Option<(f64, Vec<u32>)> = None;
        for a in acts {
            let q = self.game.immediate(s, &a) + self.game.rho() * self.continuation_at(s, &a);
            let take = match &best {
                None => true,
                Some((bq, b)) => prefer(q, &a, *bq, b, &beliefs),
            };
            if take {
                best = Some((q, a));
            }
        }
        best.expect("nonempty action set").1
    }
}

/// Parallel network as a searchable game.
#[derive(Clone, Debug)]
pub struct ParallelGame {
    pub net: NetworkConfig<f64>,
}

impl ParallelGame {
    pub fn new(net: NetworkConfig<f64>) -> Self {
        Self { net }
    }
}

/// Splits of `n` into `parts`, coarsened until at most `max` remain.
pub fn bounded_compositions(n: u32, parts: usize, max: usize) -> Vec<Vec<u32>> {
    let mut step = 1;
    loop {
        let units = (n / step) as u64;
        // C(units + parts - 1, parts - 1)
        let mut count: u64 = 1;
        for k in 1..parts as u64 {
            count = count * (units + k) / k;
        }
        if count as usize <= max || step >= n.max(1) {
            return if step == 1 {
                compositions(n, parts)
            } else {
                coarse_compositions(n, parts, step)
            };
        }
        step += 1;
    }
}

impl Game for ParallelGame {
    type State = NetworkState<f64>;

    fn rho(&self) -> f64 {
        self.net.rho
    }

    fn arrivals(&self, s: &Self::State) -> u32 {
        s.arrivals
    }

    fn planning_arrivals(&self) -> u32 {
        self.net.arrivals.mean.round() as u32
    }

    fn with_arrivals(&self, s: &Self::State, n: u32) -> Self::State {
        let mut s = s.clone();
        s.arrivals = n;
        s
    }

    fn immediate(&self, s: &Self::State, counts: &[u32]) -> f64 {
        immediate_costs(s, &Allocation::integer(counts), &self.net.variance)
            .expect("dimensions match")
            .1
    }

    fn branches(&self, s: &Self::State, counts: &[u32]) -> Vec<(f64, Self::State)> {
        outcome_branches(&self.net, s, counts)
    }

    fn mean_next(&self, s: &Self::State, counts: &[u32]) -> Self::State {
        // a missing report keeps the belief at its own expectation
        let mut next = s.clone();
        for (i, p) in next.paths.iter_mut().enumerate() {
            *p = advance_path(&self.net, p, counts[i + 1], Observation::None);
        }
        next
    }

    fn root_actions(&self, s: &Self::State, max_actions: usize) -> Vec<Vec<u32>> {
        bounded_compositions(s.arrivals, s.m() + 1, max_actions)
    }

    fn candidates(&self, s: &Self::State) -> Vec<Vec<u32>> {
        let n = s.arrivals;
        let v = &self.net.variance;
        let social = largest_remainder(&one_shot_social(s, v).counts, n);
        let myopic = largest_remainder(&myopic_allocation(s, v).counts, n);
        let mut safe = vec![0; s.m() + 1];
        safe[0] = n;
        let mut out = vec![social.clone(), myopic, safe];
        // one extra traveller on each unexplored path
        for i in 1..=s.m() {
            if social[i] == 0 && social[0] > 0 {
                let mut a = social.clone();
                a[0] -= 1;
                a[i] += 1;
                out.push(a);
            }
        }
        out
    }

    fn rules(&self) -> usize {
        3
    }

    fn beliefs(&self, s: &Self::State) -> Vec<f64> {
        s.paths.iter().map(|p| p.belief).collect()
    }
}

impl Planner for Lookahead<ParallelGame> {
    fn rho(&self) -> f64 {
        self.game.net.rho
    }

    fn continuation(&self, state: &NetworkState<f64>, counts: &[u32]) -> f64 {
        self.continuation_at(state, counts)
    }

    fn best(&self, state: &NetworkState<f64>) -> Vec<u32> {
        self.best_action(state)
    }

    fn network(&self) -> &NetworkConfig<f64> {
        &self.game.net
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::*;
    use crate::policies::mdp::{MdpConfig, ValueFunction};

    fn net(rho: f64) -> NetworkConfig<f64> {
        NetworkConfig {
            arrivals: ArrivalModel::constant(4),
            hazard: HazardModel {
                alpha_high: 1.3,
                alpha_low: 0.3,
                xbar_true: 0.4,
                prior: Prior::Point { value: 0.4 },
                transition: None,
            },
            observation: ObservationModel::gaussian(0.3, 1.0),
            variance: VarianceCost::CappedReciprocal { a: 4.0, b: 8.0 },
            correlation: Correlation::Linear,
            safe_latency: 10.0,
            paths: vec![StochasticPath::new(8.0, 0.4), StochasticPath::new(6.0, 0.6)],
            rho,
        }
    }

    #[test]
    fn bounded_action_sets() {
        assert_eq!(bounded_compositions(10, 3, 1000).len(), 66);
        let c = bounded_compositions(121, 4, 400);
        assert!(c.len() <= 400 && c.iter().all(|a| a.iter().sum::<u32>() == 121));
    }

    #[test]
    fn zero_discount_matches_one_shot() {
        let n = net(0.0);
        let la = Lookahead::new(ParallelGame::new(n.clone()), LookaheadConfig::default());
        let s = n.initial_state(4);
        let best = la.best_action(&s);
        let g = ParallelGame::new(n);
        let min = compositions(4, 3)
            .iter()
            .map(|a| g.immediate(&s, a))
            .fold(f64::INFINITY, f64::min);
        assert!((g.immediate(&s, &best) - min).abs() < 1e-9);
    }

    #[test]
    fn close_to_exact_on_small_instance() {
        let mut n = net(0.8);
        n.paths.truncate(1);
        let mdp = MdpConfig {
            rho: 0.8,
            belief_grid: 41,
            latency_step: 0.5,
            latency_max: 60.0,
            max_iterations: 2000,
            tolerance: 1e-8,
        };
        let vf = ValueFunction::solve(&n, &mdp).unwrap();
        let la = Lookahead::new(ParallelGame::new(n.clone()), LookaheadConfig::default());
        let s = n.initial_state(4);
        let a = la.best_action(&s);
        let exact_best = vf.q_value(&s, &vf.best(&s));
        assert!(vf.q_value(&s, &a) <= exact_best * 1.05, "{a:?}");
    }
}
