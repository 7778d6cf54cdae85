//! Routing policies. Every policy sees the platform state only.

pub mod char;
pub mod hiding;
pub mod lookahead;
pub mod mdp;
pub mod myopic;

pub use self::char::{
    char_expected_allocation, char_optimize_hiding_count, char_posterior_check, char_recommend,
    default_char_params, recommendation_probs, CharParams, Group, Recommendation,
};
pub use hiding::{deterministic_recommendation_allocation, hiding_allocation};
pub use lookahead::{Game, Lookahead, LookaheadConfig, ParallelGame};
pub use mdp::{socially_optimal_allocation, Axis, MdpConfig, ValueFunction};
pub use myopic::{myopic_allocation, one_shot_social, water_fill};

use crate::error::Result;
use crate::model::{immediate_costs, largest_remainder, Allocation, NetworkConfig, NetworkState};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Long-term cost oracle used by the social policy and by CHAR.
pub trait Planner: Send + Sync {
    fn rho(&self) -> f64;
    /// Expected cost-to-go after `counts` is taken in `state`.
    fn continuation(&self, state: &NetworkState<f64>, counts: &[u32]) -> f64;
    fn best(&self, state: &NetworkState<f64>) -> Vec<u32>;
    fn network(&self) -> &NetworkConfig<f64>;

    fn q_value(&self, state: &NetworkState<f64>, counts: &[u32]) -> f64 {
        let imm = immediate_costs(state, &Allocation::integer(counts), &self.network().variance)
            .expect("dimensions match")
            .1;
        imm + self.rho() * self.continuation(state, counts)
    }
}

impl Planner for ValueFunction {
    fn rho(&self) -> f64 {
        self.mdp.rho
    }

    fn continuation(&self, state: &NetworkState<f64>, counts: &[u32]) -> f64 {
        ValueFunction::continuation(self, state, counts)
    }

    fn best(&self, state: &NetworkState<f64>) -> Vec<u32> {
        socially_optimal_allocation(state, self).round_to(state.arrivals)
    }

    fn network(&self) -> &NetworkConfig<f64> {
        &self.network
    }
}

/// A routing rule consulted once per slot.
pub trait Policy: Send + Sync {
    fn name(&self) -> &str;
    /// Counts per path; integer policies return whole numbers.
    fn allocate(&self, state: &NetworkState<f64>, rng: &mut dyn RngCore) -> Result<Allocation<f64>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    Myopic,
    Social,
    Hiding,
    DeterministicRec,
    Char,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 5] = [
        PolicyKind::Myopic,
        PolicyKind::Social,
        PolicyKind::Hiding,
        PolicyKind::DeterministicRec,
        PolicyKind::Char,
    ];

    pub fn label(self) -> &'static str {
        match self {
            PolicyKind::Myopic => "myopic",
            PolicyKind::Social => "social",
            PolicyKind::Hiding => "hiding",
            PolicyKind::DeterministicRec => "deterministic-rec",
            PolicyKind::Char => "char",
        }
    }
}

pub struct MyopicPolicy {
    pub config: NetworkConfig<f64>,
}

impl Policy for MyopicPolicy {
    fn name(&self) -> &str {
        "myopic"
    }

    fn allocate(&self, state: &NetworkState<f64>, _: &mut dyn RngCore) -> Result<Allocation<f64>> {
        Ok(myopic_allocation(state, &self.config.variance))
    }
}

pub struct SocialPolicy {
    pub planner: Arc<dyn Planner>,
}

impl Policy for SocialPolicy {
    fn name(&self) -> &str {
        "social"
    }

    fn allocate(&self, state: &NetworkState<f64>, _: &mut dyn RngCore) -> Result<Allocation<f64>> {
        Ok(Allocation::integer(&self.planner.best(state)))
    }
}

pub struct HidingPolicy {
    pub config: NetworkConfig<f64>,
}

impl Policy for HidingPolicy {
    fn name(&self) -> &str {
        "hiding"
    }

    fn allocate(&self, state: &NetworkState<f64>, _: &mut dyn RngCore) -> Result<Allocation<f64>> {
        Ok(hiding_allocation(&self.config.hazard.prior, state.arrivals, &self.config))
    }
}

pub struct DeterministicRecPolicy {
    pub config: NetworkConfig<f64>,
}

impl Policy for DeterministicRecPolicy {
    fn name(&self) -> &str {
        "deterministic-rec"
    }

    fn allocate(&self, state: &NetworkState<f64>, _: &mut dyn RngCore) -> Result<Allocation<f64>> {
        Ok(deterministic_recommendation_allocation(
            &self.config.hazard.prior,
            state.arrivals,
            &self.config,
        ))
    }
}

/// Realized CHAR split: the hiding group follows the prior split, every
/// other user draws a recommendation and obeys it unless the prior makes
/// the recommended path dominated.
pub struct CharPolicy {
    pub config: NetworkConfig<f64>,
    pub params: CharParams,
    pub planner: Arc<dyn Planner>,
}

impl CharPolicy {
    pub fn hiding_count(&self, state: &NetworkState<f64>) -> Result<u32> {
        Ok(char_optimize_hiding_count(state, &self.config, self.planner.as_ref(), &self.params)?.0)
    }
}

impl Policy for CharPolicy {
    fn name(&self) -> &str {
        "char"
    }

    fn allocate(&self, state: &NetworkState<f64>, rng: &mut dyn RngCore) -> Result<Allocation<f64>> {
        let n = state.arrivals;
        let nh = self.hiding_count(state)?;
        let hiding = hiding_allocation(&self.config.hazard.prior, n, &self.config);
        let share: Vec<f64> = hiding
            .counts
            .iter()
            .map(|&c| if n > 0 { c * nh as f64 / n as f64 } else { 0.0 })
            .collect();
        let mut counts = largest_remainder(&share, nh);
        for r in char_recommend(state, &self.params, n - nh, rng)? {
            let to = self::char::obeyed_paths(&self.config, r.path);
            let j = if to.len() == 1 { to[0] } else { to[rng.gen_range(0..to.len())] };
            counts[j] += 1;
        }
        Ok(Allocation::integer(&counts))
    }
}
