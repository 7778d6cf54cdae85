//! Named experiments: policy construction, runs, and their CSV tables.

use crate::analysis::{
    empirical_poa, find_threshold_xth, poa_char, PoAReport, ScenarioKind, ScenarioNetwork, ScenarioSpec,
    ThresholdReport,
};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::lineargraph::{
    hybrid_monte_carlo, HybridChar, HybridConfig, HybridHiding, HybridMyopic, HybridNetwork, HybridPolicy,
    HybridSocial,
};
use crate::model::NetworkConfig;
use crate::policies::{
    default_char_params, CharParams, CharPolicy, DeterministicRecPolicy, HidingPolicy, Lookahead, LookaheadConfig,
    MdpConfig, MyopicPolicy, ParallelGame, Planner, Policy, PolicyKind, SocialPolicy, ValueFunction,
};
use crate::sim::{monte_carlo, MonteCarloSummary, SimOptions, TruthMode};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;

/// A parallel network with the solver settings and mechanism parameters
/// needed to build any policy on it. The planner is built on first use.
pub struct Workbench {
    pub spec: ScenarioSpec,
    pub char: CharParams,
    mdp: Option<MdpConfig>,
    lookahead: LookaheadConfig,
    cache: Option<PathBuf>,
    planner: Option<Arc<dyn Planner>>,
}

/// Threshold 0.5 on the prior, half the steady split as the bad-state
/// target.
pub fn default_char_for(cfg: &NetworkConfig<f64>) -> CharParams {
    let n = cfg.arrivals.mean;
    let m = cfg.m();
    default_char_params(&cfg.hazard.prior, 0.5, n, n / (2.0 * (m as f64 + 1.0)), m)
}

impl Workbench {
    pub fn new(spec: ScenarioSpec) -> Result<Self> {
        let char = default_char_for(spec.parallel()?);
        Ok(Self {
            spec,
            char,
            mdp: None,
            lookahead: LookaheadConfig::default(),
            cache: None,
            planner: None,
        })
    }

    pub fn from_config(exp: &ExperimentConfig) -> Result<Self> {
        let mut wb = Self::new(exp.resolved()?)?;
        if let Some(c) = &exp.char {
            wb.char = c.clone();
        }
        wb.mdp = exp.mdp.clone();
        if let Some(l) = &exp.lookahead {
            wb.lookahead = l.clone();
        }
        Ok(wb)
    }

    /// Value tables are persisted under `dir` and reused when their key
    /// matches.
    pub fn with_cache(mut self, dir: Option<PathBuf>) -> Self {
        self.cache = dir;
        self
    }

    pub fn network(&self) -> &NetworkConfig<f64> {
        match &self.spec.network {
            ScenarioNetwork::Parallel(c) => c,
            ScenarioNetwork::Hybrid(_) => unreachable!("checked in new"),
        }
    }

    /// Edits the network; the planner is rebuilt on next use.
    pub fn edit(&mut self, f: impl FnOnce(&mut NetworkConfig<f64>)) -> Result<()> {
        if let ScenarioNetwork::Parallel(c) = &mut self.spec.network {
            f(c);
            c.validate()?;
        }
        let rho = self.network().rho;
        if let Some(m) = &mut self.mdp {
            m.rho = rho;
        }
        self.planner = None;
        Ok(())
    }

    pub fn set_rho(&mut self, rho: f64) -> Result<()> {
        self.edit(|c| c.rho = rho)
    }

    pub fn set_grid_beliefs(&mut self, n: usize) {
        let mut m = self.mdp.clone().unwrap_or_else(|| MdpConfig::defaults(self.network()));
        m.belief_grid = n;
        self.mdp = Some(m);
        self.planner = None;
    }

    pub fn set_tolerance(&mut self, tol: f64) {
        let mut m = self.mdp.clone().unwrap_or_else(|| MdpConfig::defaults(self.network()));
        m.tolerance = tol;
        self.mdp = Some(m);
        self.planner = None;
    }

    /// Exact value iteration up to two stochastic paths, receding-horizon
    /// search beyond.
    pub fn planner(&mut self) -> Result<Arc<dyn Planner>> {
        if let Some(p) = &self.planner {
            return Ok(p.clone());
        }
        let net = self.network().clone();
        let p: Arc<dyn Planner> = if net.m() <= 2 {
            let mut mdp = self.mdp.clone().unwrap_or_else(|| MdpConfig::defaults(&net));
            mdp.rho = net.rho;
            Arc::new(match &self.cache {
                Some(dir) => ValueFunction::load_or_solve(dir, &net, &mdp)?,
                None => ValueFunction::solve(&net, &mdp)?,
            })
        } else {
            Arc::new(Lookahead::new(ParallelGame::new(net), self.lookahead.clone()))
        };
        self.planner = Some(p.clone());
        Ok(p)
    }

    pub fn policy(&mut self, kind: PolicyKind) -> Result<Box<dyn Policy>> {
        let config = self.network().clone();
        Ok(match kind {
            PolicyKind::Myopic => Box::new(MyopicPolicy { config }),
            PolicyKind::Hiding => Box::new(HidingPolicy { config }),
            PolicyKind::DeterministicRec => Box::new(DeterministicRecPolicy { config }),
            PolicyKind::Social => Box::new(SocialPolicy {
                planner: self.planner()?,
            }),
            PolicyKind::Char => Box::new(CharPolicy {
                config,
                params: self.char.clone(),
                planner: self.planner()?,
            }),
        })
    }

    pub fn options(&self, horizon: usize, seed: u64) -> SimOptions {
        SimOptions::new(horizon, self.network().rho, seed).with_truth(self.spec.truth)
    }

    pub fn simulate(&mut self, kind: PolicyKind, runs: usize, horizon: usize, seed: u64) -> Result<MonteCarloSummary> {
        let policy = self.policy(kind)?;
        let cfg = self.network().clone();
        monte_carlo(policy.as_ref(), &cfg, runs, &self.options(horizon, seed))
    }

    /// `policy` against `reference` on common seeds at the network's own
    /// discount, with the closed forms this construction has.
    pub fn poa(
        &mut self,
        policy: PolicyKind,
        reference: PolicyKind,
        runs: usize,
        horizon: usize,
        seed: u64,
    ) -> Result<PoAReport> {
        let a = self.policy(policy)?;
        let b = self.policy(reference)?;
        let rho = self.network().rho;
        let mut r = empirical_poa(a.as_ref(), b.as_ref(), &self.spec, runs, horizon, rho, seed)?;
        if self.spec.kind == ScenarioKind::CharWorst && policy == PolicyKind::Char {
            let c = self.network();
            r.closed_form_bound = Some(poa_char(c.m(), c.arrivals.mean, &c.variance));
        }
        Ok(r)
    }

    pub fn threshold(&mut self, grid_step: f64) -> Result<ThresholdReport> {
        let planner = self.planner()?;
        find_threshold_xth(self.network(), planner.as_ref(), grid_step)
    }
}

/// Mean belief of every policy against the long-run hazard share.
/// Columns `t, policy, path, mean_belief, xbar_true`.
pub fn write_belief_csv<W: Write>(w: W, xbar_true: f64, summaries: &[MonteCarloSummary]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["t", "policy", "path", "mean_belief", "xbar_true"])?;
    for s in summaries {
        for (t, row) in s.mean_belief_trace.iter().enumerate() {
            for (i, x) in row.iter().enumerate() {
                out.write_record([
                    t.to_string(),
                    s.policy_name.clone(),
                    (i + 1).to_string(),
                    x.to_string(),
                    xbar_true.to_string(),
                ])?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

/// Hybrid policies in reporting order: social, CHAR, myopic, hiding.
pub fn hybrid_policies(net: &HybridNetwork) -> Vec<Box<dyn HybridPolicy>> {
    vec![
        Box::new(HybridSocial::new(net.clone())),
        Box::new(HybridChar::new(net.clone())),
        Box::new(HybridMyopic { net: net.clone() }),
        Box::new(HybridHiding { net: net.clone() }),
    ]
}

/// Every hybrid policy on common seeds.
pub fn hybrid_costs_by_policy(cfg: &HybridConfig, runs: usize, horizon: usize, seed: u64) -> Result<Vec<MonteCarloSummary>> {
    let net = HybridNetwork::new(cfg.clone())?;
    let opts = SimOptions::new(horizon, cfg.rho, seed).with_truth(TruthMode::Markov);
    hybrid_policies(&net)
        .iter()
        .map(|p| hybrid_monte_carlo(p.as_ref(), &net, runs, &opts))
        .collect()
}

/// Average discounted cost up to every horizon.
/// Columns `horizon, policy, mean_cost, std_error`; the standard error is
/// that of the full-horizon cost.
pub fn write_horizon_csv<W: Write>(w: W, rho: f64, summaries: &[MonteCarloSummary]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["horizon", "policy", "mean_cost", "std_error"])?;
    for s in summaries {
        out.write_record(["0".to_string(), s.policy_name.clone(), "0".to_string(), "0".to_string()])?;
        for (t, c) in s.mean_discounted_cumsum(rho).iter().enumerate() {
            out.write_record([
                (t + 1).to_string(),
                s.policy_name.clone(),
                c.to_string(),
                s.std_error().to_string(),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Costs of each policy over the social cost at one discount factor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InefficiencyRow {
    pub rho: f64,
    pub social_cost: f64,
    pub ir_myopic: f64,
    pub ir_hiding: f64,
    pub ir_char: f64,
}

impl InefficiencyRow {
    /// From summaries in [`hybrid_policies`] order.
    pub fn from_summaries(rho: f64, s: &[MonteCarloSummary]) -> Result<Self> {
        let social = s[0].mean_discounted_cost;
        if social.abs() < 1e-12 {
            return Err(Error::DegenerateRatio(social));
        }
        Ok(Self {
            rho,
            social_cost: social,
            ir_char: s[1].mean_discounted_cost / social,
            ir_myopic: s[2].mean_discounted_cost / social,
            ir_hiding: s[3].mean_discounted_cost / social,
        })
    }
}

/// Inefficiency ratios over a sweep of discount factors.
pub fn inefficiency_sweep(
    cfg: &HybridConfig,
    rhos: &[f64],
    runs: usize,
    horizon: usize,
    seed: u64,
) -> Result<Vec<InefficiencyRow>> {
    rhos.iter()
        .map(|&rho| {
            let mut c = cfg.clone();
            c.rho = rho;
            InefficiencyRow::from_summaries(rho, &hybrid_costs_by_policy(&c, runs, horizon, seed)?)
        })
        .collect()
}

/// Columns `rho, ir_myopic, ir_hiding, ir_char, social_cost`.
pub fn write_inefficiency_csv<W: Write>(w: W, rows: &[InefficiencyRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["rho", "ir_myopic", "ir_hiding", "ir_char", "social_cost"])?;
    for r in rows {
        out.write_record([
            r.rho.to_string(),
            r.ir_myopic.to_string(),
            r.ir_hiding.to_string(),
            r.ir_char.to_string(),
            r.social_cost.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Discount factors of the inefficiency figure; 1 itself is replaced by
/// 0.999 so every discounted sum stays finite.
pub const FIG8_RHOS: [f64; 6] = [0.0, 0.2, 0.4, 0.6, 0.8, 0.999];

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::{build_scenario, fig3_config};
    use crate::config::bundled;

    #[test]
    fn workbench_builds_every_policy() {
        let mut wb = Workbench::new(build_scenario(ScenarioKind::Fig3, &fig3_config(0.9)).unwrap()).unwrap();
        wb.set_grid_beliefs(11);
        for k in PolicyKind::ALL {
            let s = wb.simulate(k, 2, 3, 1).unwrap();
            assert_eq!(s.runs, 2);
            assert_eq!(s.policy_name, k.label());
        }
    }

    #[test]
    fn char_worst_report_carries_the_closed_form() {
        let exp = ExperimentConfig::from_json(bundled::CHAR_WORST).unwrap();
        let mut wb = Workbench::from_config(&exp).unwrap();
        let r = wb.poa(PolicyKind::Char, PolicyKind::Social, 2, 3, 1).unwrap();
        let expect = poa_char(2, 10.0, &wb.network().variance);
        assert_eq!(r.closed_form_bound, Some(expect));
    }

    #[test]
    fn csv_tables_have_headers() {
        let s = MonteCarloSummary {
            policy_name: "x".into(),
            runs: 1,
            mean_discounted_cost: 3.0,
            std: 0.0,
            mean_belief_trace: vec![vec![0.5], vec![0.4]],
            mean_cost_trace: vec![1.0, 2.0],
            costs: vec![3.0],
        };
        let mut buf = Vec::new();
        write_horizon_csv(&mut buf, 1.0, &[s.clone()]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next(), Some("horizon,policy,mean_cost,std_error"));
        assert_eq!(text.lines().last(), Some("2,x,3,0"));
        let mut buf = Vec::new();
        write_belief_csv(&mut buf, 0.45, &[s]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 3);
    }
}
