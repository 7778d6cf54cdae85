//! Bayesian hazard beliefs driven by crowd summaries, and the expected
//! latency recursion they feed.

use crate::error::{Error, Result};
use crate::model::{HazardModel, LatencyMap, ObservationModel};
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};

/// Fused crowd report for one path in one slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Observation {
    Hazard,
    Clear,
    /// Nobody travelled the path.
    None,
}

impl Observation {
    /// CSV encoding: 1, 0, or empty.
    pub fn code(self) -> &'static str {
        match self {
            Observation::Hazard => "1",
            Observation::Clear => "0",
            Observation::None => "",
        }
    }
}

/// Two-state chain `Pr(H -> H)` and `Pr(L -> H)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransitionMatrix<S> {
    pub q_hh: S,
    pub q_lh: S,
}

impl<S: Scalar> TransitionMatrix<S> {
    pub fn identity() -> Self {
        Self {
            q_hh: S::one(),
            q_lh: S::zero(),
        }
    }

    /// Chain with stationary mass `xbar` on the high state and lag-one
    /// autocorrelation `q_hh - q_lh = persistence`.
    pub fn with_steady_state(xbar: S, persistence: S) -> Self {
        let q_lh = xbar * (S::one() - persistence);
        Self {
            q_hh: q_lh + persistence,
            q_lh,
        }
    }

    pub fn steady_state(&self) -> Option<S> {
        let den = self.q_lh + (S::one() - self.q_hh);
        if den > S::zero() {
            Some(self.q_lh / den)
        } else {
            None
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = |v: S| v >= S::zero() && v <= S::one();
        if p(self.q_hh) && p(self.q_lh) {
            Ok(())
        } else {
            Err(Error::config("transition", "entries must be probabilities"))
        }
    }
}

const FLOOR: f64 = 1e-12;

/// Posterior hazard belief after observing `y` from `n` travellers.
pub fn posterior_update<S: Scalar>(x: S, n: u32, y: Observation, obs: &ObservationModel<S>) -> S {
    if y == Observation::None || n == 0 || x == S::zero() || x == S::one() {
        return x;
    }
    let xc = x.max(S::lit(FLOOR)).min(S::one() - S::lit(FLOOR));
    let (qh, ql) = (obs.q_high(n), obs.q_low(n));
    let (lh, ll) = match y {
        Observation::Hazard => (qh, ql),
        Observation::Clear => (S::one() - qh, S::one() - ql),
        Observation::None => unreachable!(),
    };
    let num = xc * lh;
    let den = num + (S::one() - xc) * ll;
    if den <= S::zero() {
        return x;
    }
    num / den
}

pub fn expected_alpha<S: Scalar>(x_post: S, hz: &HazardModel<S>) -> S {
    x_post * hz.alpha_high + (S::one() - x_post) * hz.alpha_low
}

/// Expected next-slot latency `E[f(ell, n, alpha)]` under the posterior.
pub fn latency_update<S: Scalar, F: LatencyMap<S> + ?Sized>(
    ell: S,
    n: S,
    x_post: S,
    hz: &HazardModel<S>,
    f: &F,
) -> S {
    x_post * f.apply(ell, n, hz.alpha_high) + (S::one() - x_post) * f.apply(ell, n, hz.alpha_low)
}

/// `Pr(y = hazard)` before the report arrives.
pub fn hazard_prob<S: Scalar>(x: S, n: u32, obs: &ObservationModel<S>) -> S {
    x * obs.q_high(n) + (S::one() - x) * obs.q_low(n)
}

pub fn belief_transition<S: Scalar>(x_post: S, tm: &TransitionMatrix<S>) -> S {
    x_post * tm.q_hh + (S::one() - x_post) * tm.q_lh
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Correlation, Prior};
    use approx::assert_abs_diff_eq;

    fn hz() -> HazardModel<f64> {
        HazardModel {
            alpha_high: 1.5,
            alpha_low: 0.05,
            xbar_true: 0.45,
            prior: Prior::Point { value: 0.45 },
            transition: None,
        }
    }

    #[test]
    fn bayes_examples() {
        let o = ObservationModel::constant(0.8, 0.2);
        assert_abs_diff_eq!(posterior_update(0.5, 3, Observation::Hazard, &o), 0.8, epsilon = 1e-12);
        assert_eq!(posterior_update(0.0, 3, Observation::Hazard, &o), 0.0);
        assert_eq!(posterior_update(0.0, 3, Observation::Clear, &o), 0.0);
        assert_eq!(posterior_update(0.7, 0, Observation::None, &o), 0.7);
    }

    #[test]
    fn degenerate_likelihood_keeps_belief() {
        let o = ObservationModel::constant(1.0, 1.0);
        assert_eq!(posterior_update(0.3, 2, Observation::Clear, &o), 0.3);
    }

    #[test]
    fn alpha_and_latency() {
        assert_abs_diff_eq!(expected_alpha(0.45, &hz()), 0.7025, epsilon = 1e-12);
        assert_eq!(expected_alpha(1.0, &hz()), 1.5);
        assert_eq!(expected_alpha(0.0, &hz()), 0.05);
        let lin = Correlation::Linear;
        assert_abs_diff_eq!(latency_update(20.0, 5.0, 0.45, &hz(), &lin), 17.5625, epsilon = 1e-12);
        assert_abs_diff_eq!(latency_update(0.0, 7.0, 1.0, &hz(), &lin), 10.5, epsilon = 1e-12);
        let unit = HazardModel { alpha_high: 1.0, alpha_low: 0.0, ..hz() };
        assert_abs_diff_eq!(latency_update(10.0, 0.0, 1.0, &unit, &lin), 10.0, epsilon = 1e-12);
    }

    #[test]
    fn hazard_probability_bounds() {
        let o = ObservationModel::constant(0.8, 0.2);
        assert_abs_diff_eq!(hazard_prob(0.5, 1, &o), 0.5, epsilon = 1e-12);
        assert_eq!(hazard_prob(1.0, 1, &o), 0.8);
        assert_eq!(hazard_prob(0.0, 1, &o), 0.2);
    }

    #[test]
    fn transitions() {
        let tm = TransitionMatrix { q_hh: 0.5, q_lh: 1.0 };
        assert_abs_diff_eq!(belief_transition(0.5, &tm), 0.75, epsilon = 1e-12);
        assert_eq!(belief_transition(0.37, &TransitionMatrix::identity()), 0.37);
        assert_abs_diff_eq!(
            belief_transition(0.0, &TransitionMatrix { q_hh: 0.9, q_lh: 0.3 }),
            0.3,
            epsilon = 1e-12
        );
        let built = TransitionMatrix::with_steady_state(0.388, 0.6);
        assert_abs_diff_eq!(built.steady_state().unwrap(), 0.388, epsilon = 1e-12);
    }
}
