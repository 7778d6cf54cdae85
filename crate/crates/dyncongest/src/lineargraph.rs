//! Chains of parallel subnetworks and hybrid networks whose routes share
//! road segments.

use crate::belief::{Observation, TransitionMatrix};
use crate::dynamics::advance_path;
use crate::error::{Error, Result};
use crate::model::{
    largest_remainder, Allocation, ArrivalModel, Correlation, HazardModel, NetworkConfig, NetworkState,
    ObservationModel, PathBeliefState, Prior, StochasticPath, VarianceCost,
};
use crate::policies::lookahead::bounded_compositions;
use crate::policies::{
    hiding_allocation, myopic_allocation, recommendation_probs, CharParams, CharPolicy, Policy,
};
use crate::sim::{episode_seed, step, summarize, EpisodeLedger, MonteCarloSummary, SimOptions, StepRecord, TruthMode, WorldTruth};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

// ---------------------------------------------------------------------------
// linear path graphs

/// One hop of a linear graph: a safe path and `M` stochastic paths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Subnetwork {
    pub safe_latency: f64,
    pub paths: Vec<StochasticPath<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearGraphConfig {
    pub subnetworks: Vec<Subnetwork>,
    pub arrivals: ArrivalModel<f64>,
    pub hazard: HazardModel<f64>,
    pub observation: ObservationModel<f64>,
    pub variance: VarianceCost<f64>,
    #[serde(default)]
    pub correlation: Correlation<f64>,
    pub rho: f64,
}

impl LinearGraphConfig {
    /// Number of intermediate nodes.
    pub fn k(&self) -> usize {
        self.subnetworks.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .subnetworks
            .first()
            .ok_or_else(|| Error::config("subnetworks", "need at least one"))?;
        if self.subnetworks.iter().any(|s| s.paths.len() != first.paths.len()) {
            return Err(Error::config("subnetworks", "every subnetwork needs the same M"));
        }
        if let Some(tm) = &self.hazard.transition {
            tm.validate()?;
        }
        for j in 0..self.subnetworks.len() {
            self.subnetwork(j).validate()?;
        }
        Ok(())
    }

    /// Degenerate graph with no intermediate node.
    pub fn from_parallel(cfg: &NetworkConfig<f64>) -> Self {
        Self {
            subnetworks: vec![Subnetwork {
                safe_latency: cfg.safe_latency,
                paths: cfg.paths.clone(),
            }],
            arrivals: cfg.arrivals.clone(),
            hazard: cfg.hazard.clone(),
            observation: cfg.observation.clone(),
            variance: cfg.variance.clone(),
            correlation: cfg.correlation,
            rho: cfg.rho,
        }
    }

    /// `k + 1` copies of one parallel network.
    pub fn repeated(cfg: &NetworkConfig<f64>, k: usize) -> Self {
        let mut g = Self::from_parallel(cfg);
        g.subnetworks = vec![g.subnetworks[0].clone(); k + 1];
        g
    }

    /// Subnetwork `j` seen as a parallel network.
    pub fn subnetwork(&self, j: usize) -> NetworkConfig<f64> {
        let s = &self.subnetworks[j];
        NetworkConfig {
            arrivals: self.arrivals.clone(),
            hazard: self.hazard.clone(),
            observation: self.observation.clone(),
            variance: self.variance.clone(),
            correlation: self.correlation,
            safe_latency: s.safe_latency,
            paths: s.paths.clone(),
            rho: self.rho,
        }
    }

    pub fn initial_state(&self, arrivals: u32) -> Vec<NetworkState<f64>> {
        (0..self.subnetworks.len())
            .map(|j| self.subnetwork(j).initial_state(arrivals))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearAllocation {
    pub per_node: Vec<Allocation<f64>>,
    /// Some downstream subnetwork left the regime where cost-to-go is
    /// independent of the current choice.
    pub approximate: bool,
}

/// Downstream cost-to-go does not depend on the current choice when every
/// later subnetwork's safe path beats its empty stochastic paths.
pub fn choice_independent(cfg: &LinearGraphConfig, state: &[NetworkState<f64>], from: usize) -> bool {
    state.iter().skip(from + 1).all(|s| {
        let c0 = s.path_cost(0, s.arrivals as f64, &cfg.variance);
        (1..=s.m()).all(|i| c0 <= s.free_cost(i, &cfg.variance))
    })
}

/// Per-subnetwork myopic split. Downstream paths are traversed whatever is
/// chosen now, so frozen-belief cost-to-go adds the same amount to every
/// current option and the current-slot equilibrium is kept; the flag
/// records when that argument leaves the worst-case regime.
pub fn myopic_linear_allocation(cfg: &LinearGraphConfig, state: &[NetworkState<f64>]) -> LinearAllocation {
    let approximate = (0..state.len()).any(|j| !choice_independent(cfg, state, j));
    LinearAllocation {
        per_node: state.iter().map(|s| myopic_allocation(s, &cfg.variance)).collect(),
        approximate,
    }
}

/// Prior-only split at every node with `arrivals[j]` users there.
pub fn hiding_linear_allocation(prior: &Prior<f64>, arrivals: &[u32], cfg: &LinearGraphConfig) -> Vec<Allocation<f64>> {
    arrivals
        .iter()
        .enumerate()
        .map(|(j, &n)| hiding_allocation(prior, n, &cfg.subnetwork(j)))
        .collect()
}

/// CHAR run independently at each node: `(hiding-group size, split)`.
pub fn char_linear(
    state: &[NetworkState<f64>],
    policies: &[CharPolicy],
    rng: &mut dyn RngCore,
) -> Result<Vec<(u32, Allocation<f64>)>> {
    if state.len() != policies.len() {
        return Err(Error::InvalidInput("one CHAR policy per subnetwork".into()));
    }
    state
        .iter()
        .zip(policies)
        .map(|(s, p)| Ok((p.hiding_count(s)?, p.allocate(s, rng)?)))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearLedger {
    pub per_node: Vec<EpisodeLedger>,
    pub discounted_cost: f64,
}

/// Every user crosses all subnetworks in the slot they arrive; nodes share
/// the arrival count and one random stream, visited in order.
pub fn run_linear_episode(policies: &[&dyn Policy], cfg: &LinearGraphConfig, opts: &SimOptions) -> Result<LinearLedger> {
    opts.validate()?;
    let k1 = cfg.subnetworks.len();
    if policies.len() != k1 {
        return Err(Error::InvalidInput("one policy per subnetwork".into()));
    }
    let nets: Vec<NetworkConfig<f64>> = (0..k1).map(|j| cfg.subnetwork(j)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut truths: Vec<WorldTruth> = nets.iter().map(|c| WorldTruth::sample(c, &mut rng)).collect();
    let first = match opts.first_arrivals {
        Some(n) => n,
        None => cfg.arrivals.sample(&mut rng),
    };
    let mut states: Vec<NetworkState<f64>> = nets.iter().map(|c| c.initial_state(first)).collect();
    let mut ledgers: Vec<EpisodeLedger> = (0..k1)
        .map(|_| EpisodeLedger {
            records: Vec::with_capacity(opts.horizon),
            discounted_cost: 0.0,
            rho: opts.rho,
            seed: opts.seed,
            belief_trace: Vec::with_capacity(opts.horizon),
        })
        .collect();
    let mut disc = 1.0;
    for t in 0..opts.horizon {
        let mut next_states = Vec::with_capacity(k1);
        for j in 0..k1 {
            let s = &states[j];
            ledgers[j].belief_trace.push(s.paths.iter().map(|p| p.belief).collect());
            let alloc = policies[j].allocate(s, &mut rng).map_err(|e| Error::BadAllocation {
                policy: policies[j].name().to_string(),
                reason: e.to_string(),
            })?;
            let (next, rec) = step(&nets[j], s, &mut truths[j], &alloc, opts.truth, t, &mut rng)?;
            ledgers[j].discounted_cost += disc * rec.social_cost;
            ledgers[j].records.push(rec);
            next_states.push(next);
        }
        disc *= opts.rho;
        let n = cfg.arrivals.sample(&mut rng);
        for s in &mut next_states {
            s.arrivals = n;
        }
        states = next_states;
    }
    Ok(LinearLedger {
        discounted_cost: ledgers.iter().map(|l| l.discounted_cost).sum(),
        per_node: ledgers,
    })
}

/// Monte-Carlo summary per subnetwork and for the whole chain.
pub fn linear_monte_carlo(
    policies: &[&dyn Policy],
    cfg: &LinearGraphConfig,
    runs: usize,
    opts: &SimOptions,
) -> Result<(Vec<MonteCarloSummary>, f64)> {
    if runs == 0 {
        return Err(Error::config("runs", "must be at least 1"));
    }
    let eps: Vec<LinearLedger> = (0..runs as u64)
        .into_par_iter()
        .map(|r| {
            let o = SimOptions {
                seed: episode_seed(opts.seed, r),
                ..opts.clone()
            };
            run_linear_episode(policies, cfg, &o)
        })
        .collect::<Result<_>>()?;
    let per_node = (0..cfg.subnetworks.len())
        .map(|j| {
            let ls: Vec<EpisodeLedger> = eps.iter().map(|e| e.per_node[j].clone()).collect();
            summarize(policies[j].name(), &ls)
        })
        .collect();
    let total = eps.iter().map(|e| e.discounted_cost).sum::<f64>() / runs as f64;
    Ok((per_node, total))
}

/// Count estimate of a two-state chain from a fully observed sequence
/// (`true` = high hazard), with its stationary high-state mass.
pub fn estimate_transition_matrix(seq: &[bool]) -> Result<(TransitionMatrix<f64>, f64)> {
    if seq.len() < 2 {
        return Err(Error::InvalidInput("need at least two states".into()));
    }
    let (mut hh, mut h, mut lh, mut l) = (0u64, 0u64, 0u64, 0u64);
    for w in seq.windows(2) {
        if w[0] {
            h += 1;
            hh += w[1] as u64;
        } else {
            l += 1;
            lh += w[1] as u64;
        }
    }
    let ratio = |a: u64, b: u64| if b > 0 { a as f64 / b as f64 } else { f64::NAN };
    let tm = TransitionMatrix {
        q_hh: ratio(hh, h),
        q_lh: ratio(lh, l),
    };
    if h == 0 {
        return Err(Error::UndefinedRow { state: "high", partial: tm });
    }
    if l == 0 {
        return Err(Error::UndefinedRow { state: "low", partial: tm });
    }
    let steady = tm
        .steady_state()
        .ok_or(Error::UndefinedRow { state: "high", partial: tm })?;
    Ok((tm, steady))
}

// ---------------------------------------------------------------------------
// hybrid networks

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SegmentKind {
    Safe {
        latency: f64,
    },
    Stochastic {
        latency: f64,
        belief: f64,
        /// Long-run share of high-hazard slots.
        steady_state: f64,
        /// Overrides the chain built from `steady_state` and the network's
        /// persistence.
        #[serde(default)]
        transition: Option<TransitionMatrix<f64>>,
        #[serde(default)]
        initial_count: u32,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Segment {
    pub name: String,
    pub kind: SegmentKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Route {
    pub name: String,
    pub segments: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HybridConfig {
    pub segments: Vec<Segment>,
    pub routes: Vec<Route>,
    pub arrivals: ArrivalModel<f64>,
    pub alpha_high: f64,
    pub alpha_low: f64,
    pub observation: ObservationModel<f64>,
    pub variance: VarianceCost<f64>,
    #[serde(default)]
    pub correlation: Correlation<f64>,
    pub rho: f64,
    /// Lag-one autocorrelation of every hazard chain without an explicit
    /// transition matrix.
    pub persistence: f64,
    /// Route CHAR treats as its fallback.
    pub reference_route: usize,
    pub char: CharParams,
    /// Hiding-group sizes tried by CHAR: multiples of this step plus `N`.
    #[serde(default = "default_char_step")]
    pub char_step: u32,
    #[serde(default)]
    pub planner: RolloutConfig,
}

fn default_char_step() -> u32 {
    10
}

impl HybridConfig {
    /// Three routes over nine segments around a city block; two routes
    /// share their first two segments.
    pub fn baseline() -> Self {
        let st = |name: &str, belief: f64, steady: f64| Segment {
            name: name.into(),
            kind: SegmentKind::Stochastic {
                latency: 20.0,
                belief,
                steady_state: steady,
                transition: None,
                initial_count: 40,
            },
        };
        let safe = |name: &str, latency: f64| Segment {
            name: name.into(),
            kind: SegmentKind::Safe { latency },
        };
        Self {
            segments: vec![
                st("Donghuamen", 0.5, 0.388),
                st("Beiheyuan", 0.2, 0.106),
                safe("Anding", 30.0),
                st("Beichizi", 0.3, 0.192),
                safe("Dianmen", 10.0),
                safe("Outer Jiugulou", 15.0),
                safe("Beichen", 15.0),
                safe("Jingzang", 10.0),
                st("Jianxiang", 0.8, 0.936),
            ],
            routes: vec![
                Route {
                    name: "Path 1".into(),
                    segments: vec![0, 1, 2],
                },
                Route {
                    name: "Path 2".into(),
                    segments: vec![3, 4, 5, 6],
                },
                Route {
                    name: "Path 3".into(),
                    segments: vec![3, 4, 7, 8],
                },
            ],
            arrivals: ArrivalModel::truncated_normal(121.0, 12.33, 84, 158),
            alpha_high: 1.3,
            alpha_low: 0.3,
            observation: ObservationModel::gaussian(0.3, 1.0),
            variance: VarianceCost::CappedReciprocal { a: 100.0, b: 200.0 },
            correlation: Correlation::Linear,
            rho: 0.98,
            persistence: 0.5,
            reference_route: 1,
            char: CharParams::new(0.5, 0.42, 0.002, 0.5),
            char_step: default_char_step(),
            planner: RolloutConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.arrivals.validate()?;
        self.observation.validate(self.arrivals.max)?;
        self.variance.validate()?;
        self.char.validate()?;
        if self.routes.len() < 2 {
            return Err(Error::config("routes", "need at least two"));
        }
        for (r, route) in self.routes.iter().enumerate() {
            if route.segments.is_empty() || route.segments.iter().any(|&s| s >= self.segments.len()) {
                return Err(Error::config(format!("routes[{r}].segments"), "must reference valid segments"));
            }
        }
        if self.reference_route >= self.routes.len() {
            return Err(Error::config("reference_route", "out of range"));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::config("rho", "must lie in [0, 1)"));
        }
        self.planner.validate()?;
        if !(0.0..=1.0).contains(&self.persistence) {
            return Err(Error::config("persistence", "must lie in [0, 1]"));
        }
        for (i, s) in self.segments.iter().enumerate() {
            match &s.kind {
                SegmentKind::Safe { latency } if *latency < 0.0 => {
                    return Err(Error::config(format!("segments[{i}].latency"), "must be >= 0"));
                }
                SegmentKind::Stochastic {
                    latency,
                    belief,
                    steady_state,
                    transition,
                    ..
                } => {
                    if *latency < 0.0 || !(0.0..=1.0).contains(belief) || !(0.0..=1.0).contains(steady_state) {
                        return Err(Error::config(format!("segments[{i}]"), "latency >= 0 and probabilities in [0, 1]"));
                    }
                    if let Some(tm) = transition {
                        tm.validate()?;
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Per-segment platform state; safe segments keep their fixed latency and
/// a zero belief.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HybridState {
    pub segments: Vec<PathBeliefState<f64>>,
    pub arrivals: u32,
    /// Route flows of the previous slot.
    pub last_routes: Vec<u32>,
}

/// A validated hybrid network with per-segment dynamics prepared.
#[derive(Clone, Debug)]
pub struct HybridNetwork {
    pub config: HybridConfig,
    /// Parallel-network view of each stochastic segment (for its updates).
    seg_cfg: Vec<Option<NetworkConfig<f64>>>,
    stochastic: Vec<bool>,
}

impl HybridNetwork {
    pub fn new(config: HybridConfig) -> Result<Self> {
        config.validate()?;
        let seg_cfg = config
            .segments
            .iter()
            .map(|s| match &s.kind {
                SegmentKind::Safe { .. } => None,
                SegmentKind::Stochastic {
                    latency,
                    belief,
                    steady_state,
                    transition,
                    ..
                } => {
                    let tm = transition.unwrap_or_else(|| TransitionMatrix::with_steady_state(*steady_state, config.persistence));
                    Some(NetworkConfig {
                        arrivals: config.arrivals.clone(),
                        hazard: HazardModel {
                            alpha_high: config.alpha_high,
                            alpha_low: config.alpha_low,
                            xbar_true: *steady_state,
                            prior: Prior::Point { value: *steady_state },
                            transition: Some(tm),
                        },
                        observation: config.observation.clone(),
                        variance: config.variance.clone(),
                        correlation: config.correlation,
                        safe_latency: 0.0,
                        paths: vec![StochasticPath::new(*latency, *belief)],
                        rho: config.rho,
                    })
                }
            })
            .collect();
        let stochastic = config
            .segments
            .iter()
            .map(|s| matches!(s.kind, SegmentKind::Stochastic { .. }))
            .collect();
        Ok(Self {
            config,
            seg_cfg,
            stochastic,
        })
    }

    pub fn routes(&self) -> usize {
        self.config.routes.len()
    }

    pub fn transition(&self, s: usize) -> Option<TransitionMatrix<f64>> {
        self.seg_cfg[s].as_ref().and_then(|c| c.hazard.transition)
    }

    pub fn initial_state(&self, arrivals: u32) -> HybridState {
        let segments = self
            .config
            .segments
            .iter()
            .map(|s| match &s.kind {
                SegmentKind::Safe { latency } => PathBeliefState {
                    expected_latency: *latency,
                    belief: 0.0,
                    last_count: 0.0,
                },
                SegmentKind::Stochastic {
                    latency,
                    belief,
                    initial_count,
                    ..
                } => PathBeliefState {
                    expected_latency: *latency,
                    belief: *belief,
                    last_count: *initial_count as f64,
                },
            })
            .collect();
        HybridState {
            segments,
            arrivals,
            last_routes: vec![0; self.routes()],
        }
    }

    /// Flow on every segment for the given route flows.
    pub fn segment_flows(&self, route_flows: &[f64]) -> Vec<f64> {
        let mut f = vec![0.0; self.config.segments.len()];
        for (r, route) in self.config.routes.iter().enumerate() {
            for &s in &route.segments {
                f[s] += route_flows[r];
            }
        }
        f
    }

    fn segment_base(&self, state: &HybridState, s: usize) -> f64 {
        let p = &state.segments[s];
        if self.stochastic[s] {
            p.expected_latency + self.config.variance.eval(p.last_count)
        } else {
            p.expected_latency
        }
    }

    /// Uninformed view of a segment: nominal latency through the latency
    /// map at the long-run hazard share, plus the variance term at the
    /// configured last count.
    fn prior_base(&self, s: usize) -> f64 {
        match (&self.config.segments[s].kind, &self.seg_cfg[s]) {
            (SegmentKind::Safe { latency }, _) => *latency,
            (SegmentKind::Stochastic { initial_count, .. }, Some(c)) => {
                crate::policies::hiding::prior_free_cost(&c.hazard.prior, c, 0) - c.variance.eval(0.0)
                    + c.variance.eval(*initial_count as f64)
            }
            _ => unreachable!("stochastic segments carry a config"),
        }
    }

    fn route_costs_from(&self, bases: &[f64], route_flows: &[f64]) -> Vec<f64> {
        let f = self.segment_flows(route_flows);
        self.config
            .routes
            .iter()
            .map(|r| r.segments.iter().map(|&s| bases[s] + f[s]).sum())
            .collect()
    }

    pub fn bases(&self, state: &HybridState) -> Vec<f64> {
        (0..self.config.segments.len()).map(|s| self.segment_base(state, s)).collect()
    }

    pub fn prior_bases(&self) -> Vec<f64> {
        (0..self.config.segments.len()).map(|s| self.prior_base(s)).collect()
    }

    pub fn social_cost(&self, state: &HybridState, route_flows: &[f64]) -> f64 {
        hybrid_costs(self, state, route_flows)
            .iter()
            .zip(route_flows)
            .map(|(c, f)| c * f)
            .sum()
    }

    /// Hazard belief of a route: chance that at least one of its
    /// stochastic segments is in the high state.
    pub fn route_belief(&self, state: &HybridState, r: usize) -> f64 {
        let clear: f64 = self.config.routes[r]
            .segments
            .iter()
            .filter(|&&s| self.stochastic[s])
            .map(|&s| 1.0 - state.segments[s].belief)
            .product();
        1.0 - clear
    }

    /// Successor given route flows and per-segment reports.
    pub fn advance(&self, state: &HybridState, route_counts: &[u32], reports: &[Observation]) -> HybridState {
        let flows: Vec<f64> = route_counts.iter().map(|&c| c as f64).collect();
        let f = self.segment_flows(&flows);
        let segments = state
            .segments
            .iter()
            .enumerate()
            .map(|(s, p)| match &self.seg_cfg[s] {
                Some(c) => advance_path(c, p, f[s].round() as u32, reports[s]),
                None => PathBeliefState {
                    last_count: f[s],
                    ..p.clone()
                },
            })
            .collect();
        HybridState {
            segments,
            arrivals: state.arrivals,
            last_routes: route_counts.to_vec(),
        }
    }
}

/// Per-user cost of every route: each segment charges its latency, the
/// total flow through it, and for stochastic segments the variance term.
pub fn hybrid_costs(net: &HybridNetwork, state: &HybridState, route_flows: &[f64]) -> Vec<f64> {
    net.route_costs_from(&net.bases(state), route_flows)
}

/// Users join one at a time. `social` picks the route with the least
/// increase in total cost, otherwise the cheapest route for the joining
/// user; selfish splits are then polished by single-user moves until no
/// one gains.
fn greedy_assignment(net: &HybridNetwork, bases: &[f64], n: u32, social: bool) -> Vec<u32> {
    let routes = &net.config.routes;
    let mut seg = vec![0.0f64; bases.len()];
    let mut counts = vec![0u32; routes.len()];
    let own = |seg: &[f64], r: usize, extra: f64| -> f64 {
        routes[r].segments.iter().map(|&s| bases[s] + seg[s] + extra).sum()
    };
    for _ in 0..n {
        let mut best = (f64::INFINITY, 0);
        for r in 0..routes.len() {
            let c = if social {
                // marginal total cost: own cost plus one more unit for everyone sharing
                routes[r]
                    .segments
                    .iter()
                    .map(|&s| bases[s] + 2.0 * seg[s] + 1.0)
                    .sum()
            } else {
                own(&seg, r, 1.0)
            };
            if c < best.0 - 1e-12 {
                best = (c, r);
            }
        }
        counts[best.1] += 1;
        for &s in &routes[best.1].segments {
            seg[s] += 1.0;
        }
    }
    if !social {
        for _ in 0..(4 * n as usize + 16) {
            let mut moved = false;
            for a in 0..routes.len() {
                if counts[a] == 0 {
                    continue;
                }
                let here = own(&seg, a, 0.0);
                for b in 0..routes.len() {
                    if a == b {
                        continue;
                    }
                    for &s in &routes[a].segments {
                        seg[s] -= 1.0;
                    }
                    let there = own(&seg, b, 1.0);
                    if there < here - 1e-9 {
                        for &s in &routes[b].segments {
                            seg[s] += 1.0;
                        }
                        counts[a] -= 1;
                        counts[b] += 1;
                        moved = true;
                        break;
                    }
                    for &s in &routes[a].segments {
                        seg[s] += 1.0;
                    }
                }
                if moved {
                    break;
                }
            }
            if !moved {
                break;
            }
        }
    }
    counts
}

/// Selfish route split on current platform costs.
pub fn hybrid_myopic_allocation(net: &HybridNetwork, state: &HybridState) -> Vec<u32> {
    greedy_assignment(net, &net.bases(state), state.arrivals, false)
}

/// Selfish route split on prior costs, with the same proportions for any
/// arrival count.
pub fn hybrid_hiding_allocation(net: &HybridNetwork, n: u32) -> Vec<u32> {
    let mean = net.config.arrivals.mean.round() as u32;
    let base = greedy_assignment(net, &net.prior_bases(), mean, false);
    scale_split(&base, n)
}

/// Minimizer of the current slot's social cost, user by user.
pub fn hybrid_one_shot_social(net: &HybridNetwork, state: &HybridState) -> Vec<u32> {
    greedy_assignment(net, &net.bases(state), state.arrivals, true)
}

fn scale_split(split: &[u32], n: u32) -> Vec<u32> {
    let total: u32 = split.iter().sum();
    if total == 0 {
        let mut v = vec![0; split.len()];
        v[0] = n;
        return v;
    }
    let share: Vec<f64> = split.iter().map(|&c| c as f64 * n as f64 / total as f64).collect();
    largest_remainder(&share, n)
}

/// Settings of the hybrid rollout planner.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutConfig {
    /// Sampled futures per candidate split.
    pub samples: usize,
    /// Slots simulated before the tail estimate.
    pub horizon: usize,
    /// Size of the coarse grid of route splits tried at the root.
    pub max_root_actions: usize,
    /// Users the probing rule keeps on an otherwise empty route.
    pub probe: u32,
    /// Probing skips routes whose per-user cost exceeds this multiple of
    /// the dearest used route.
    pub probe_ratio: f64,
    /// Paired standard errors a candidate must gain over the one-shot
    /// social split to replace it.
    pub margin: f64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            samples: 6,
            horizon: 30,
            max_root_actions: 28,
            probe: 3,
            probe_ratio: 20.0,
            margin: 2.0,
        }
    }
}

impl RolloutConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 || self.horizon == 0 || self.max_root_actions == 0 {
            return Err(Error::config("planner", "samples, horizon and max_root_actions must be positive"));
        }
        if !(self.probe_ratio > 0.0) || !(self.margin >= 0.0) {
            return Err(Error::config("planner", "probe_ratio must be positive and margin non-negative"));
        }
        Ok(())
    }
}

/// Monte-Carlo rollout planner. Hidden segment states are drawn from the
/// current beliefs and evolved with their chains; reports are simulated
/// from them, and after the first slot a base rule routes everyone: the
/// one-shot social split, or the same split with probes on empty routes.
/// All candidates share the same sampled futures.
#[derive(Clone, Debug)]
pub struct HybridPlanner {
    pub net: HybridNetwork,
    pub cfg: RolloutConfig,
}

impl HybridPlanner {
    pub fn new(net: HybridNetwork) -> Self {
        let cfg = net.config.planner.clone();
        Self { net, cfg }
    }

    pub fn immediate(&self, s: &HybridState, counts: &[u32]) -> f64 {
        let flows: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
        self.net.social_cost(s, &flows)
    }

    /// One-shot social split with `probe` users moved from the largest
    /// route onto every empty route that is not too dear.
    pub fn probing_split(&self, s: &HybridState) -> Vec<u32> {
        let net = &self.net;
        let mut counts = hybrid_one_shot_social(net, s);
        let flows: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
        let costs = hybrid_costs(net, s, &flows);
        let dearest = (0..counts.len())
            .filter(|&r| counts[r] > 0)
            .map(|r| costs[r])
            .fold(0.0, f64::max);
        for r in 0..counts.len() {
            if counts[r] > 0 || costs[r] > self.cfg.probe_ratio * dearest {
                continue;
            }
            let top = (0..counts.len()).max_by_key(|&k| counts[k]).expect("at least two routes");
            let d = self.cfg.probe.min(counts[top] / 2);
            counts[top] -= d;
            counts[r] += d;
        }
        counts
    }

    fn sampled_cost(&self, s: &HybridState, first: &[u32], probing: bool, rng: &mut ChaCha8Rng) -> f64 {
        let net = &self.net;
        let rho = net.config.rho;
        let mean = net.config.arrivals.mean.round() as u32;
        let mut high: Vec<bool> = s
            .segments
            .iter()
            .enumerate()
            .map(|(k, p)| net.stochastic[k] && rng.gen::<f64>() < p.belief)
            .collect();
        let mut state = s.clone();
        let mut counts = first.to_vec();
        let mut total = 0.0;
        let mut disc = 1.0;
        for _ in 0..self.cfg.horizon {
            total += disc * self.immediate(&state, &counts);
            let flows: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
            let f = net.segment_flows(&flows);
            let mut reports = vec![Observation::None; f.len()];
            for (k, r) in reports.iter_mut().enumerate() {
                if !net.stochastic[k] {
                    continue;
                }
                // drawn even on empty segments so candidates share their futures
                let u: f64 = rng.gen();
                let n = f[k].round() as u32;
                if n > 0 {
                    let obs = &net.config.observation;
                    let q = if high[k] { obs.q_high(n) } else { obs.q_low(n) };
                    *r = if u < q {
                        Observation::Hazard
                    } else {
                        Observation::Clear
                    };
                }
            }
            state = net.advance(&state, &counts, &reports);
            state.arrivals = mean;
            for (k, h) in high.iter_mut().enumerate() {
                if let Some(tm) = net.transition(k) {
                    *h = rng.gen::<f64>() < if *h { tm.q_hh } else { tm.q_lh };
                }
            }
            counts = if probing {
                self.probing_split(&state)
            } else {
                hybrid_one_shot_social(net, &state)
            };
            disc *= rho;
        }
        total + disc * self.immediate(&state, &counts) / (1.0 - rho)
    }

    /// Sampled costs of taking `counts` now and the better base rule
    /// afterwards, on the futures fixed by `seed`.
    fn sampled(&self, s: &HybridState, counts: &[u32], seed: u64) -> Vec<f64> {
        let run = |probing: bool| -> Vec<f64> {
            (0..self.cfg.samples as u64)
                .map(|j| self.sampled_cost(s, counts, probing, &mut ChaCha8Rng::seed_from_u64(episode_seed(seed, j))))
                .collect()
        };
        let (a, b) = (run(false), run(true));
        if a.iter().sum::<f64>() <= b.iter().sum::<f64>() {
            a
        } else {
            b
        }
    }

    /// Expected discounted cost of taking `counts` now and a base rule
    /// afterwards.
    pub fn q_value(&self, s: &HybridState, counts: &[u32], seed: u64) -> f64 {
        let v = self.sampled(s, counts, seed);
        v.iter().sum::<f64>() / v.len() as f64
    }

    /// Cost from the next slot on, already discounted to the current slot.
    pub fn discounted_tail(&self, s: &HybridState, counts: &[u32], seed: u64) -> f64 {
        self.q_value(s, counts, seed) - self.immediate(s, counts)
    }

    /// Root candidates: a coarse grid, the one-shot social, selfish and
    /// previous splits, and small shifts away from the one-shot social split.
    pub fn root_actions(&self, s: &HybridState) -> Vec<Vec<u32>> {
        let r = self.net.routes();
        let social = hybrid_one_shot_social(&self.net, s);
        let mut acts = bounded_compositions(s.arrivals, r, self.cfg.max_root_actions);
        acts.push(hybrid_myopic_allocation(&self.net, s));
        if s.last_routes.iter().sum::<u32>() > 0 {
            acts.push(scale_split(&s.last_routes, s.arrivals));
        }
        for a in 0..r {
            for b in 0..r {
                if a == b {
                    continue;
                }
                for d in [1, 3, 8, 20] {
                    if social[a] >= d {
                        let mut m = social.clone();
                        m[a] -= d;
                        m[b] += d;
                        acts.push(m);
                    }
                }
            }
        }
        acts.push(social);
        acts.sort();
        acts.dedup();
        acts
    }

    pub fn best(&self, s: &HybridState, seed: u64) -> Vec<u32> {
        let base = hybrid_one_shot_social(&self.net, s);
        let reference = self.sampled(s, &base, seed);
        let k = reference.len() as f64;
        let mut best = (0.0, base);
        for a in self.root_actions(s) {
            let d: Vec<f64> = self.sampled(s, &a, seed).iter().zip(&reference).map(|(x, y)| x - y).collect();
            let mean = d.iter().sum::<f64>() / k;
            let se = if d.len() > 1 {
                (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1.0) / k).sqrt()
            } else {
                0.0
            };
            if mean < best.0 && mean + self.cfg.margin * se < 0.0 {
                best = (mean, a);
            }
        }
        best.1
    }
}

/// A routing rule on a hybrid network.
pub trait HybridPolicy: Send + Sync {
    fn name(&self) -> &str;
    fn allocate(&self, state: &HybridState, rng: &mut dyn RngCore) -> Result<Vec<u32>>;
}

pub struct HybridMyopic {
    pub net: HybridNetwork,
}

impl HybridPolicy for HybridMyopic {
    fn name(&self) -> &str {
        "myopic"
    }

    fn allocate(&self, state: &HybridState, _: &mut dyn RngCore) -> Result<Vec<u32>> {
        Ok(hybrid_myopic_allocation(&self.net, state))
    }
}

pub struct HybridHiding {
    pub net: HybridNetwork,
}

impl HybridPolicy for HybridHiding {
    fn name(&self) -> &str {
        "hiding"
    }

    fn allocate(&self, state: &HybridState, _: &mut dyn RngCore) -> Result<Vec<u32>> {
        Ok(hybrid_hiding_allocation(&self.net, state.arrivals))
    }
}

pub struct HybridSocial {
    pub planner: HybridPlanner,
}

impl HybridSocial {
    pub fn new(net: HybridNetwork) -> Self {
        Self {
            planner: HybridPlanner::new(net),
        }
    }
}

impl HybridPolicy for HybridSocial {
    fn name(&self) -> &str {
        "social"
    }

    fn allocate(&self, state: &HybridState, rng: &mut dyn RngCore) -> Result<Vec<u32>> {
        Ok(self.planner.best(state, rng.next_u64()))
    }
}

/// CHAR on routes: the reference route plays the safe path, the others
/// are recommended by their route hazard belief.
pub struct HybridChar {
    pub planner: HybridPlanner,
}

impl HybridChar {
    pub fn new(net: HybridNetwork) -> Self {
        Self {
            planner: HybridPlanner::new(net),
        }
    }

    fn net(&self) -> &HybridNetwork {
        &self.planner.net
    }

    /// Recommendation probability per route.
    pub fn route_probs(&self, state: &HybridState) -> Result<Vec<f64>> {
        let net = self.net();
        let reference = net.config.reference_route;
        let others: Vec<usize> = (0..net.routes()).filter(|&r| r != reference).collect();
        let beliefs: Vec<f64> = others.iter().map(|&r| net.route_belief(state, r)).collect();
        let p = recommendation_probs(&beliefs, &net.config.char)?;
        let mut out = vec![0.0; net.routes()];
        out[reference] = p[0];
        for (k, &r) in others.iter().enumerate() {
            out[r] = p[k + 1];
        }
        Ok(out)
    }

    /// Hiding-group size with the least immediate plus discounted
    /// continuation cost of the expected split.
    pub fn hiding_count(&self, state: &HybridState, seed: u64) -> Result<u32> {
        let net = self.net();
        let n = state.arrivals;
        let probs = self.route_probs(state)?;
        let hiding = hybrid_hiding_allocation(net, n);
        let step = net.config.char_step.max(1);
        let mut sizes: Vec<u32> = (0..=n).step_by(step as usize).chain([1, 2, 4, 6, n]).filter(|&k| k <= n).collect();
        sizes.sort_unstable();
        sizes.dedup();
        let mut best = (f64::INFINITY, 0);
        for nh in sizes {
            let expected: Vec<f64> = hiding
                .iter()
                .zip(&probs)
                .map(|(&h, &p)| h as f64 * nh as f64 / n.max(1) as f64 + (n - nh) as f64 * p)
                .collect();
            let counts = largest_remainder(&expected, n);
            let q = net.social_cost(state, &expected) + self.planner.discounted_tail(state, &counts, seed);
            if q < best.0 - 1e-9 * (1.0 + best.0.abs()) {
                best = (q, nh);
            }
        }
        Ok(best.1)
    }
}

impl HybridPolicy for HybridChar {
    fn name(&self) -> &str {
        "char"
    }

    fn allocate(&self, state: &HybridState, rng: &mut dyn RngCore) -> Result<Vec<u32>> {
        let n = state.arrivals;
        let nh = self.hiding_count(state, rng.next_u64())?;
        let mut counts = hybrid_hiding_allocation(self.net(), nh);
        let probs = self.route_probs(state)?;
        for _ in nh..n {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut pick = self.net().config.reference_route;
            for (r, &p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    pick = r;
                    break;
                }
            }
            counts[pick] += 1;
        }
        Ok(counts)
    }
}

/// One hybrid episode: hazard chains per stochastic segment started from
/// their stationary law, reports drawn from the realized states.
pub fn run_hybrid_episode(policy: &dyn HybridPolicy, net: &HybridNetwork, opts: &SimOptions) -> Result<EpisodeLedger> {
    opts.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let nseg = net.config.segments.len();
    let mut high: Vec<bool> = (0..nseg)
        .map(|s| match &net.seg_cfg[s] {
            Some(c) => rng.gen::<f64>() < c.hazard.xbar_true,
            None => false,
        })
        .collect();
    let first = match opts.first_arrivals {
        Some(n) => n,
        None => net.config.arrivals.sample(&mut rng),
    };
    let mut state = net.initial_state(first);
    let stoch: Vec<usize> = (0..nseg).filter(|&s| net.stochastic[s]).collect();
    let mut records = Vec::with_capacity(opts.horizon);
    let mut belief_trace = Vec::with_capacity(opts.horizon);
    let mut total = 0.0;
    let mut disc = 1.0;
    for t in 0..opts.horizon {
        belief_trace.push(stoch.iter().map(|&s| state.segments[s].belief).collect());
        let counts = policy.allocate(&state, &mut rng)?;
        if counts.len() != net.routes() || counts.iter().sum::<u32>() != state.arrivals {
            return Err(Error::BadAllocation {
                policy: policy.name().to_string(),
                reason: format!("{counts:?} does not split {} users over the routes", state.arrivals),
            });
        }
        let flows: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
        let per_route = hybrid_costs(net, &state, &flows);
        let cost: f64 = per_route.iter().zip(&flows).map(|(c, f)| c * f).sum();
        let seg_flow = net.segment_flows(&flows);
        let mut reports = vec![Observation::None; nseg];
        for &s in &stoch {
            let n = seg_flow[s].round() as u32;
            if n > 0 {
                let q = if high[s] {
                    net.config.observation.q_high(n)
                } else {
                    net.config.observation.q_low(n)
                };
                reports[s] = if rng.gen::<f64>() < q {
                    Observation::Hazard
                } else {
                    Observation::Clear
                };
            }
        }
        let mut next = net.advance(&state, &counts, &reports);
        for &s in &stoch {
            high[s] = match opts.truth {
                TruthMode::Persistent => high[s],
                TruthMode::Iid => rng.gen::<f64>() < net.seg_cfg[s].as_ref().map_or(0.0, |c| c.hazard.xbar_true),
                TruthMode::Markov => {
                    let tm = net.transition(s).unwrap_or_else(TransitionMatrix::identity);
                    rng.gen::<f64>() < if high[s] { tm.q_hh } else { tm.q_lh }
                }
            };
        }
        total += disc * cost;
        disc *= opts.rho;
        records.push(StepRecord {
            time: t,
            arrivals: state.arrivals,
            allocation: flows,
            realized: counts,
            observations: stoch.iter().map(|&s| reports[s]).collect(),
            per_path_cost: per_route,
            social_cost: cost,
            beliefs_after: stoch.iter().map(|&s| next.segments[s].belief).collect(),
            latencies_after: stoch.iter().map(|&s| next.segments[s].expected_latency).collect(),
        });
        next.arrivals = net.config.arrivals.sample(&mut rng);
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

pub fn hybrid_monte_carlo(
    policy: &dyn HybridPolicy,
    net: &HybridNetwork,
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
            run_hybrid_episode(policy, net, &o)
        })
        .collect::<Result<_>>()?;
    Ok(summarize(policy.name(), &ledgers))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::fig3_config;
    use crate::policies::MyopicPolicy;

    #[test]
    fn transition_estimates() {
        let (tm, x) = estimate_transition_matrix(&[true, true, false, true]).unwrap();
        assert_eq!(tm.q_hh, 0.5);
        assert_eq!(tm.q_lh, 1.0);
        assert!((x - 2.0 / 3.0).abs() < 1e-12);
        match estimate_transition_matrix(&[true; 5]) {
            Err(Error::UndefinedRow { state, partial }) => {
                assert_eq!(state, "low");
                assert_eq!(partial.q_hh, 1.0);
            }
            other => panic!("{other:?}"),
        }
        assert!(estimate_transition_matrix(&[true]).is_err());
    }

    #[test]
    fn recovers_a_known_chain() {
        let tm = TransitionMatrix::with_steady_state(0.388, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut h = true;
        let seq: Vec<bool> = (0..20_000)
            .map(|_| {
                let cur = h;
                h = rng.gen::<f64>() < if h { tm.q_hh } else { tm.q_lh };
                cur
            })
            .collect();
        let (est, _) = estimate_transition_matrix(&seq).unwrap();
        assert!((est.q_hh - tm.q_hh).abs() < 0.05 && (est.q_lh - tm.q_lh).abs() < 0.05);
    }

    #[test]
    fn shared_segment_congestion() {
        let net = HybridNetwork::new(HybridConfig::baseline()).unwrap();
        let s = net.initial_state(7);
        let zero = hybrid_costs(&net, &s, &[0.0, 0.0, 0.0]);
        let loaded = hybrid_costs(&net, &s, &[0.0, 3.0, 4.0]);
        // Beichizi and Dianmen carry 7 for both routes 2 and 3
        assert!((loaded[1] - zero[1] - (7.0 + 7.0 + 3.0 + 3.0)).abs() < 1e-12);
        assert!((loaded[2] - zero[2] - (7.0 + 7.0 + 4.0 + 4.0)).abs() < 1e-12);
        assert_eq!(loaded[0], zero[0]);
    }

    #[test]
    fn selfish_split_is_an_equilibrium() {
        let net = HybridNetwork::new(HybridConfig::baseline()).unwrap();
        let s = net.initial_state(121);
        let counts = hybrid_myopic_allocation(&net, &s);
        assert_eq!(counts.iter().sum::<u32>(), 121);
        let flows: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
        let c = hybrid_costs(&net, &s, &flows);
        for a in 0..3 {
            if counts[a] == 0 {
                continue;
            }
            for b in 0..3 {
                let mut moved = flows.clone();
                moved[a] -= 1.0;
                moved[b] += 1.0;
                assert!(hybrid_costs(&net, &s, &moved)[b] >= c[a] - 1e-9);
            }
        }
    }

    #[test]
    fn single_subnetwork_matches_parallel() {
        let cfg = fig3_config(0.9);
        let g = LinearGraphConfig::from_parallel(&cfg);
        assert_eq!(g.k(), 0);
        assert_eq!(g.subnetwork(0), cfg);
        let states = g.initial_state(5);
        let lin = myopic_linear_allocation(&g, &states);
        assert_eq!(lin.per_node[0], myopic_allocation(&cfg.initial_state(5), &cfg.variance));
        let h = hiding_linear_allocation(&cfg.hazard.prior, &[5], &g);
        assert_eq!(h[0], hiding_allocation(&cfg.hazard.prior, 5, &cfg));

        let p = MyopicPolicy { config: cfg.clone() };
        let opts = SimOptions::new(8, 0.9, 3);
        let a = crate::sim::run_episode(&p, &cfg, &opts).unwrap();
        let b = run_linear_episode(&[&p], &g, &opts).unwrap();
        assert_eq!(a, b.per_node[0]);
        assert_eq!(a.discounted_cost.to_bits(), b.discounted_cost.to_bits());
    }

    #[test]
    fn identical_subnetworks_identical_splits() {
        let cfg = fig3_config(0.9);
        let g = LinearGraphConfig::repeated(&cfg, 2);
        let states = g.initial_state(5);
        let lin = myopic_linear_allocation(&g, &states);
        assert!(lin.per_node.windows(2).all(|w| w[0] == w[1]));
        let h = hiding_linear_allocation(&cfg.hazard.prior, &[5, 5, 5], &g);
        assert!(h.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn planner_returns_a_full_split() {
        let mut cfg = HybridConfig::baseline();
        cfg.planner.samples = 2;
        cfg.planner.horizon = 5;
        let net = HybridNetwork::new(cfg).unwrap();
        let planner = HybridPlanner::new(net.clone());
        let s = net.initial_state(121);
        let a = planner.best(&s, 3);
        assert_eq!(a.iter().sum::<u32>(), 121);
        assert_eq!(a, planner.best(&s, 3));
        let q = planner.q_value(&s, &a, 3);
        assert!(q > planner.immediate(&s, &a));
    }

    #[test]
    fn probes_cheap_empty_routes_only() {
        let net = HybridNetwork::new(HybridConfig::baseline()).unwrap();
        let planner = HybridPlanner::new(net.clone());
        let mut s = net.initial_state(121);
        // Donghuamen expensive enough to be dropped, not enough to be skipped
        s.segments[0].expected_latency = 2000.0;
        let plain = hybrid_one_shot_social(&net, &s);
        assert_eq!(plain[0], 0);
        let probed = planner.probing_split(&s);
        assert_eq!(probed[0], planner.cfg.probe);
        s.segments[0].expected_latency = 1e6;
        assert_eq!(planner.probing_split(&s)[0], 0);
    }
}
