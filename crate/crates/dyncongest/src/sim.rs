//! Ground-truth simulation of the parallel network and discounted-cost
//! bookkeeping.

use crate::belief::Observation;
use crate::dynamics::advance_path;
use crate::error::{Error, Result};
use crate::model::{immediate_costs, Allocation, NetworkConfig, NetworkState};
use crate::policies::Policy;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;

/// How the hidden hazard states evolve between slots.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TruthMode {
    /// Fresh draw every slot with `Pr(high) = xbar`.
    Iid,
    /// One draw per episode.
    #[default]
    Persistent,
    /// Two-state chain from the hazard model's transition matrix.
    Markov,
}

impl TruthMode {
    /// Markov when the hazard model carries a chain, otherwise one draw
    /// per episode.
    pub fn for_config(cfg: &NetworkConfig<f64>) -> Self {
        if cfg.hazard.transition.is_some() {
            TruthMode::Markov
        } else {
            TruthMode::Persistent
        }
    }
}

/// Realized hazard states; never shown to a policy.
#[derive(Clone, Debug, PartialEq)]
pub struct WorldTruth {
    pub alpha_high: Vec<bool>,
    pub xbar_true: Vec<f64>,
}

impl WorldTruth {
    pub fn sample<R: Rng + ?Sized>(cfg: &NetworkConfig<f64>, rng: &mut R) -> Self {
        let xbar: Vec<f64> = (0..cfg.m()).map(|i| cfg.xbar_of(i)).collect();
        Self {
            alpha_high: xbar.iter().map(|&x| rng.gen::<f64>() < x).collect(),
            xbar_true: xbar,
        }
    }

    pub fn advance<R: Rng + ?Sized>(&mut self, cfg: &NetworkConfig<f64>, mode: TruthMode, rng: &mut R) {
        for (i, h) in self.alpha_high.iter_mut().enumerate() {
            *h = match mode {
                TruthMode::Iid => rng.gen::<f64>() < self.xbar_true[i],
                TruthMode::Persistent => *h,
                TruthMode::Markov => {
                    let tm = cfg.hazard.transition.unwrap_or_else(crate::belief::TransitionMatrix::identity);
                    let p = if *h { tm.q_hh } else { tm.q_lh };
                    rng.gen::<f64>() < p
                }
            };
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub time: usize,
    pub arrivals: u32,
    /// What the policy asked for.
    pub allocation: Vec<f64>,
    /// Integer travellers per path after rounding.
    pub realized: Vec<u32>,
    pub observations: Vec<Observation>,
    pub per_path_cost: Vec<f64>,
    pub social_cost: f64,
    pub beliefs_after: Vec<f64>,
    pub latencies_after: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLedger {
    pub records: Vec<StepRecord>,
    pub discounted_cost: f64,
    pub rho: f64,
    pub seed: u64,
    /// Belief vector at the start of every slot.
    pub belief_trace: Vec<Vec<f64>>,
}

impl EpisodeLedger {
    pub fn recompute(&self) -> f64 {
        let mut disc = 1.0;
        let mut total = 0.0;
        for r in &self.records {
            total += disc * r.social_cost;
            disc *= self.rho;
        }
        total
    }

    /// Bound on the cost beyond the horizon when slots cost at most `c_max`.
    pub fn truncation_bound(&self, c_max: f64) -> f64 {
        self.rho.powi(self.records.len() as i32) * c_max / (1.0 - self.rho)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let m = self.records.first().map_or(0, |r| r.beliefs_after.len());
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["t".to_string(), "N".to_string()];
        header.extend((0..=m).map(|i| format!("n_{i}")));
        header.extend((1..=m).map(|i| format!("y_{i}")));
        header.extend((1..=m).map(|i| format!("x_{i}")));
        header.extend((1..=m).map(|i| format!("ell_{i}")));
        header.push("social_cost".into());
        header.push("discounted_cumsum".into());
        out.write_record(&header)?;
        let mut cum = 0.0;
        let mut disc = 1.0;
        for r in &self.records {
            cum += disc * r.social_cost;
            disc *= self.rho;
            let mut row = vec![r.time.to_string(), r.arrivals.to_string()];
            row.extend(r.realized.iter().map(|n| n.to_string()));
            row.extend(r.observations.iter().map(|y| y.code().to_string()));
            row.extend(r.beliefs_after.iter().map(|x| x.to_string()));
            row.extend(r.latencies_after.iter().map(|l| l.to_string()));
            row.push(r.social_cost.to_string());
            row.push(cum.to_string());
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Advance one slot: round the allocation, draw reports from the realized
/// hazard states, update beliefs and latencies, then move the truth.
pub fn step<R: Rng + ?Sized>(
    cfg: &NetworkConfig<f64>,
    state: &NetworkState<f64>,
    truth: &mut WorldTruth,
    alloc: &Allocation<f64>,
    mode: TruthMode,
    time: usize,
    rng: &mut R,
) -> Result<(NetworkState<f64>, StepRecord)> {
    alloc.validate(state)?;
    let realized = alloc.round_to(state.arrivals);
    let (per_path_cost, social_cost) = immediate_costs(state, &Allocation::integer(&realized), &cfg.variance)?;
    let mut next = state.clone();
    let mut observations = Vec::with_capacity(state.m());
    for (i, p) in state.paths.iter().enumerate() {
        let n = realized[i + 1];
        let y = if n == 0 {
            Observation::None
        } else {
            let q = if truth.alpha_high[i] {
                cfg.observation.q_high(n)
            } else {
                cfg.observation.q_low(n)
            };
            if rng.gen::<f64>() < q {
                Observation::Hazard
            } else {
                Observation::Clear
            }
        };
        observations.push(y);
        next.paths[i] = advance_path(cfg, p, n, y);
    }
    truth.advance(cfg, mode, rng);
    let record = StepRecord {
        time,
        arrivals: state.arrivals,
        allocation: alloc.counts.clone(),
        realized,
        observations,
        per_path_cost,
        social_cost,
        beliefs_after: next.paths.iter().map(|p| p.belief).collect(),
        latencies_after: next.paths.iter().map(|p| p.expected_latency).collect(),
    };
    Ok((next, record))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimOptions {
    pub horizon: usize,
    pub rho: f64,
    pub seed: u64,
    #[serde(default)]
    pub truth: TruthMode,
    /// Arrivals in the first slot; sampled when absent.
    #[serde(default)]
    pub first_arrivals: Option<u32>,
}

impl SimOptions {
    pub fn new(horizon: usize, rho: f64, seed: u64) -> Self {
        Self {
            horizon,
            rho,
            seed,
            truth: TruthMode::Persistent,
            first_arrivals: None,
        }
    }

    pub fn with_truth(mut self, truth: TruthMode) -> Self {
        self.truth = truth;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::config("horizon", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::config("rho", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Seed of episode `run` under root seed `base`.
pub fn episode_seed(base: u64, run: u64) -> u64 {
    // splitmix64 finalizer over the run counter
    let mut z = run.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    base ^ (z ^ (z >> 31))
}

pub fn run_episode(policy: &dyn Policy, cfg: &NetworkConfig<f64>, opts: &SimOptions) -> Result<EpisodeLedger> {
    opts.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut truth = WorldTruth::sample(cfg, &mut rng);
    let first = match opts.first_arrivals {
        Some(n) => n,
        None => cfg.arrivals.sample(&mut rng),
    };
    let mut state = cfg.initial_state(first);
    let mut records = Vec::with_capacity(opts.horizon);
    let mut belief_trace = Vec::with_capacity(opts.horizon);
    let mut total = 0.0;
    let mut disc = 1.0;
    for t in 0..opts.horizon {
        belief_trace.push(state.paths.iter().map(|p| p.belief).collect());
        let alloc = policy.allocate(&state, &mut rng).map_err(|e| Error::BadAllocation {
            policy: policy.name().to_string(),
            reason: e.to_string(),
        })?;
        alloc.validate(&state).map_err(|e| Error::BadAllocation {
            policy: policy.name().to_string(),
            reason: e.to_string(),
        })?;
        let (mut next, rec) = step(cfg, &state, &mut truth, &alloc, opts.truth, t, &mut rng)?;
        total += disc * rec.social_cost;
        disc *= opts.rho;
        next.arrivals = cfg.arrivals.sample(&mut rng);
        records.push(rec);
        state = next;
    }
    Ok(EpisodeLedger {
        records,
        discounted_cost: total,
        rho: opts.rho,
        seed: opts.seed,
        belief_trace,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloSummary {
    pub policy_name: String,
    pub runs: usize,
    pub mean_discounted_cost: f64,
    pub std: f64,
    /// Per slot, per path mean belief at the start of the slot.
    pub mean_belief_trace: Vec<Vec<f64>>,
    /// Per slot mean social cost.
    pub mean_cost_trace: Vec<f64>,
    pub costs: Vec<f64>,
}

impl MonteCarloSummary {
    pub fn std_error(&self) -> f64 {
        self.std / (self.runs as f64).sqrt()
    }

    /// Mean of the discounted partial sums, one per horizon `T = 0..`.
    pub fn mean_discounted_cumsum(&self, rho: f64) -> Vec<f64> {
        let mut disc = 1.0;
        let mut acc = 0.0;
        self.mean_cost_trace
            .iter()
            .map(|c| {
                acc += disc * c;
                disc *= rho;
                acc
            })
            .collect()
    }
}

/// Independent seeded episodes, in parallel, reduced in run order.
pub fn monte_carlo(
    policy: &dyn Policy,
    cfg: &NetworkConfig<f64>,
    runs: usize,
    opts: &SimOptions,
) -> Result<MonteCarloSummary> {
    if runs == 0 {
        return Err(Error::config("runs", "must be at least 1"));
    }
    let ledgers: Vec<EpisodeLedger> = (0..runs as u64)
        .into_par_iter()
        .map(|r| {
            let o = SimOptions {
                seed: episode_seed(opts.seed, r),
                ..opts.clone()
            };
            run_episode(policy, cfg, &o)
        })
        .collect::<Result<_>>()?;
    Ok(summarize(policy.name(), &ledgers))
}

pub fn summarize(name: &str, ledgers: &[EpisodeLedger]) -> MonteCarloSummary {
    let runs = ledgers.len();
    let costs: Vec<f64> = ledgers.iter().map(|l| l.discounted_cost).collect();
    let mean = costs.iter().sum::<f64>() / runs as f64;
    let var = if runs > 1 {
        costs.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (runs - 1) as f64
    } else {
        0.0
    };
    let horizon = ledgers[0].records.len();
    let m = ledgers[0].belief_trace.first().map_or(0, |b| b.len());
    // offsets from the first run, so a belief every run shares comes back exact
    let first = &ledgers[0].belief_trace;
    let mut beliefs = vec![vec![0.0; m]; horizon];
    let mut cost_trace = vec![0.0; horizon];
    for l in ledgers {
        for t in 0..horizon {
            for i in 0..m {
                beliefs[t][i] += (l.belief_trace[t][i] - first[t][i]) / runs as f64;
            }
            cost_trace[t] += l.records[t].social_cost / runs as f64;
        }
    }
    for (row, base) in beliefs.iter_mut().zip(first) {
        for (b, x) in row.iter_mut().zip(base) {
            *b += x;
        }
    }
    MonteCarloSummary {
        policy_name: name.to_string(),
        runs,
        mean_discounted_cost: mean,
        std: var.sqrt(),
        mean_belief_trace: beliefs,
        mean_cost_trace: cost_trace,
        costs,
    }
}

/// Per-slot summary table across several policies:
/// `policy, t, x_1..x_M, mean_social_cost, mean_discounted_cumsum`.
pub fn write_summary_csv<W: Write>(w: W, rho: f64, summaries: &[MonteCarloSummary]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let m = summaries
        .first()
        .and_then(|s| s.mean_belief_trace.first())
        .map_or(0, |b| b.len());
    let mut header = vec!["policy".to_string(), "t".to_string()];
    header.extend((1..=m).map(|i| format!("x_{i}")));
    header.push("mean_social_cost".into());
    header.push("mean_discounted_cumsum".into());
    out.write_record(&header)?;
    for s in summaries {
        let cum = s.mean_discounted_cumsum(rho);
        for (t, xs) in s.mean_belief_trace.iter().enumerate() {
            let mut row = vec![s.policy_name.clone(), t.to_string()];
            row.extend(xs.iter().map(|x| x.to_string()));
            row.push(s.mean_cost_trace[t].to_string());
            row.push(cum[t].to_string());
            out.write_record(&row)?;
        }
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::*;
    use crate::policies::{HidingPolicy, MyopicPolicy};

    fn cfg() -> NetworkConfig<f64> {
        NetworkConfig {
            arrivals: ArrivalModel::uniform(3, 5),
            hazard: HazardModel {
                alpha_high: 1.5,
                alpha_low: 0.05,
                xbar_true: 0.45,
                prior: Prior::Point { value: 0.45 },
                transition: None,
            },
            observation: ObservationModel::constant(1.0, 0.0),
            variance: VarianceCost::CappedReciprocal { a: 10.0, b: 20.0 },
            correlation: Correlation::Linear,
            safe_latency: 15.0,
            paths: vec![StochasticPath::new(2.0, 0.5)],
            rho: 0.9,
        }
    }

    #[test]
    fn unexplored_path_is_frozen() {
        let c = cfg();
        let s = c.initial_state(4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut truth = WorldTruth::sample(&c, &mut rng);
        let a = Allocation::fractional(vec![4.0, 0.0]);
        let (next, rec) = step(&c, &s, &mut truth, &a, TruthMode::Iid, 0, &mut rng).unwrap();
        assert_eq!(rec.observations, vec![Observation::None]);
        assert_eq!(next.paths[0].belief, 0.5);
    }

    #[test]
    fn perfect_reports_reveal_the_state() {
        let c = cfg();
        let s = c.initial_state(4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut truth = WorldTruth {
            alpha_high: vec![true],
            xbar_true: vec![1.0],
        };
        let a = Allocation::fractional(vec![2.0, 2.0]);
        let (next, rec) = step(&c, &s, &mut truth, &a, TruthMode::Iid, 0, &mut rng).unwrap();
        assert_eq!(rec.observations, vec![Observation::Hazard]);
        assert_eq!(next.paths[0].belief, 1.0);
    }

    #[test]
    fn ledger_and_determinism() {
        let c = cfg();
        let p = MyopicPolicy { config: c.clone() };
        let o = SimOptions::new(20, 0.9, 7);
        let a = run_episode(&p, &c, &o).unwrap();
        let b = run_episode(&p, &c, &o).unwrap();
        assert_eq!(a, b);
        assert!((a.recompute() - a.discounted_cost).abs() < 1e-9);
        let one = run_episode(&p, &c, &SimOptions::new(1, 0.9, 7)).unwrap();
        assert_eq!(one.discounted_cost, one.records[0].social_cost);
    }

    #[test]
    fn geometric_tail() {
        // hiding on a static network costs the same every slot
        let mut c = cfg();
        c.arrivals = ArrivalModel::constant(4);
        c.correlation = Correlation::Static;
        c.variance = VarianceCost::Zero;
        let p = HidingPolicy { config: c.clone() };
        let l = run_episode(&p, &c, &SimOptions::new(600, 0.99, 2)).unwrap();
        let per = l.records[0].social_cost;
        let limit = per / (1.0 - 0.99);
        assert!((limit - l.discounted_cost).abs() <= l.truncation_bound(per) + 1e-9);
    }

    #[test]
    fn monte_carlo_reproducible() {
        let c = cfg();
        let p = MyopicPolicy { config: c.clone() };
        let o = SimOptions::new(10, 0.9, 11);
        let a = monte_carlo(&p, &c, 8, &o).unwrap();
        let b = monte_carlo(&p, &c, 8, &o).unwrap();
        assert_eq!(a, b);
        let one = monte_carlo(&p, &c, 1, &o).unwrap();
        assert_eq!(one.std, 0.0);
        assert_eq!(one.mean_belief_trace.len(), 10);
        let mut buf = Vec::new();
        write_summary_csv(&mut buf, 0.9, &[a]).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("policy,t,x_1,"));
    }
}
