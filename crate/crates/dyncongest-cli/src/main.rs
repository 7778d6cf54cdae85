use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use dyncongest::analysis::{write_poa_csv, ScenarioKind};
use dyncongest::config::{bundled, ExperimentConfig};
use dyncongest::experiments::{
    hybrid_costs_by_policy, inefficiency_sweep, write_belief_csv, write_horizon_csv, write_inefficiency_csv,
    InefficiencyRow, Workbench, FIG8_RHOS,
};
use dyncongest::model::VarianceCost;
use dyncongest::policies::{MdpConfig, PolicyKind, ValueFunction};
use dyncongest::sim::{write_summary_csv, MonteCarloSummary};
use dyncongest::Error;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "dyncongest", version, about = "Routing policies and mechanisms for congestion games with crowd-sourced hazard learning")]
struct Cli {
    /// Directory for CSV and value-table output.
    #[arg(long, global = true, env = "DYNCONGEST_OUT", default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Monte-Carlo runs of one or more policies on a parallel network.
    Simulate(SimulateArgs),
    /// Value iteration; writes the table and prints convergence.
    SolveMdp(SolveArgs),
    /// Empirical ratio against the social optimum on a worst-case construction.
    Poa(PoaArgs),
    /// Belief threshold where myopic exploration falls below the optimum.
    Threshold(ThresholdArgs),
    /// Regenerate the data behind one figure.
    Reproduce(ReproduceArgs),
    /// Parse and check an experiment file.
    Validate { path: PathBuf },
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment file, or a bundled name (fig3, fig5, hybrid, theorem1, char_worst, hiding_over).
    #[arg(long)]
    config: Option<String>,
    #[arg(long)]
    rho: Option<f64>,
    /// Belief grid points for value iteration.
    #[arg(long)]
    grid_beliefs: Option<usize>,
    /// Value-iteration stopping gap.
    #[arg(long)]
    tol: Option<f64>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, default_value_t = 50)]
    runs: usize,
    #[arg(long, default_value_t = 30)]
    horizon: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Myopic,
    Social,
    Hiding,
    DeterministicRec,
    Char,
}

impl From<PolicyArg> for PolicyKind {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::Myopic => PolicyKind::Myopic,
            PolicyArg::Social => PolicyKind::Social,
            PolicyArg::Hiding => PolicyKind::Hiding,
            PolicyArg::DeterministicRec => PolicyKind::DeterministicRec,
            PolicyArg::Char => PolicyKind::Char,
        }
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    run: RunArgs,
    /// Repeat to compare several policies on common seeds.
    #[arg(long, value_enum, required = true)]
    policy: Vec<PolicyArg>,
}

#[derive(Args)]
struct SolveArgs {
    #[command(flatten)]
    common: Common,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScenarioArg {
    Theorem1Worst,
    HidingOver,
    HidingUnder,
    CharWorst,
}

#[derive(Args)]
struct PoaArgs {
    #[arg(long, value_enum)]
    scenario: ScenarioArg,
    /// Number of stochastic paths; copies of the first one.
    #[arg(long = "m", alias = "M")]
    m: Option<usize>,
    /// Policy under test; the construction's own target when omitted.
    #[arg(long, value_enum)]
    policy: Option<PolicyArg>,
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct ThresholdArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 0.01)]
    grid_step: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Figure {
    Fig3,
    Fig5,
    Fig7,
    Fig8,
}

#[derive(Args)]
struct ReproduceArgs {
    #[arg(value_enum)]
    figure: Figure,
    /// Defaults: 50, or 20 per discount factor for fig8.
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    rho: Option<f64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<Error>()) {
        Some(Error::Config { .. } | Error::Json(_) | Error::InvalidInput(_)) => 2,
        Some(Error::Infeasible(_)) => 3,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Simulate(a) => simulate(&cli.out, a),
        Cmd::SolveMdp(a) => solve_mdp(&cli.out, a),
        Cmd::Poa(a) => poa(&cli.out, a),
        Cmd::Threshold(a) => threshold(&cli.out, a),
        Cmd::Reproduce(a) => reproduce(&cli.out, a),
        Cmd::Validate { path } => {
            let cfg = ExperimentConfig::load(&path)?;
            let what = match (&cfg.network, &cfg.hybrid) {
                (Some(n), _) => format!("parallel network, M = {}", n.m()),
                (_, Some(h)) => format!("hybrid network, {} routes", h.routes.len()),
                _ => unreachable!("validated"),
            };
            if cfg.scenario.is_some() {
                cfg.resolved()?;
            }
            println!("{}: ok ({what})", path.display());
            Ok(())
        }
    }
}

/// File path first, then the bundled table.
fn load_config(name: &str) -> Result<ExperimentConfig> {
    let path = Path::new(name);
    if path.exists() {
        return Ok(ExperimentConfig::load(path)?);
    }
    let stem = name.trim_end_matches(".json");
    let text = bundled::ALL
        .iter()
        .find(|(file, _)| file.trim_end_matches(".json") == stem)
        .map(|(_, text)| *text)
        .ok_or_else(|| Error::config("config", format!("no file or bundled experiment named `{name}`")))?;
    Ok(ExperimentConfig::from_json(text)?)
}

fn workbench(common: &Common, default: &str) -> Result<Workbench> {
    let exp = load_config(common.config.as_deref().unwrap_or(default))?;
    let mut wb = Workbench::from_config(&exp)?;
    tune(&mut wb, common)?;
    Ok(wb)
}

fn tune(wb: &mut Workbench, common: &Common) -> Result<()> {
    if let Some(rho) = common.rho {
        wb.set_rho(rho)?;
    }
    if let Some(n) = common.grid_beliefs {
        wb.set_grid_beliefs(n);
    }
    if let Some(t) = common.tol {
        wb.set_tolerance(t);
    }
    Ok(())
}

fn create(out: &Path, name: &str) -> Result<BufWriter<File>> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let path = out.join(name);
    let f = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn print_costs(summaries: &[MonteCarloSummary]) {
    println!("{:<18} {:>6} {:>16} {:>12} {:>12}", "policy", "runs", "mean cost", "std err", "final x_1");
    for s in summaries {
        let x = s.mean_belief_trace.last().and_then(|r| r.first()).copied().unwrap_or(f64::NAN);
        println!(
            "{:<18} {:>6} {:>16.4} {:>12.4} {:>12.4}",
            s.policy_name,
            s.runs,
            s.mean_discounted_cost,
            s.std_error(),
            x
        );
    }
}

fn simulate(out: &Path, a: SimulateArgs) -> Result<()> {
    let Some(name) = a.common.config.clone() else {
        return Err(Error::config("config", "simulate needs --config").into());
    };
    let exp = load_config(&name)?;
    if let Some(h) = &exp.hybrid {
        return Err(Error::config(
            "config",
            format!("`{name}` is a hybrid network ({} routes); use `reproduce fig7`", h.routes.len()),
        )
        .into());
    }
    let mut wb = Workbench::from_config(&exp)?;
    tune(&mut wb, &a.common)?;
    let summaries = a
        .policy
        .iter()
        .map(|&p| wb.simulate(p.into(), a.run.runs, a.run.horizon, a.run.seed))
        .collect::<dyncongest::Result<Vec<_>>>()?;
    let rho = wb.network().rho;
    write_summary_csv(create(out, "simulate.csv")?, rho, &summaries)?;
    write_belief_csv(create(out, "beliefs.csv")?, wb.network().hazard.xbar_true, &summaries)?;
    print_costs(&summaries);
    println!("wrote {}", out.join("simulate.csv").display());
    Ok(())
}

fn solve_mdp(out: &Path, a: SolveArgs) -> Result<()> {
    let Some(name) = a.common.config.clone() else {
        return Err(Error::config("config", "solve-mdp needs --config").into());
    };
    let exp = load_config(&name)?;
    let net = exp.resolved()?.parallel()?.clone();
    let mut net = net;
    if let Some(rho) = a.common.rho {
        net.rho = rho;
        net.validate()?;
    }
    let mut mdp = exp.mdp.clone().unwrap_or_else(|| MdpConfig::defaults(&net));
    mdp.rho = net.rho;
    if let Some(n) = a.common.grid_beliefs {
        mdp.belief_grid = n;
    }
    if let Some(t) = a.common.tol {
        mdp.tolerance = t;
    }
    if net.m() > 2 {
        return Err(Error::InvalidInput(format!("value iteration supports up to 2 stochastic paths, got {}", net.m())).into());
    }
    let vf = ValueFunction::solve(&net, &mdp)?;
    let path = vf.save(out)?;
    let s0 = net.initial_state(net.arrivals.mean.round() as u32);
    println!("states      {}", vf.table.len());
    println!("iterations  {}", vf.iterations);
    println!("final gap   {:.3e}", vf.gaps.last().copied().unwrap_or(0.0));
    println!("contraction {:.6} (rho {})", vf.worst_contraction(), net.rho);
    println!("V(start)    {:.6}", vf.value(&s0));
    println!("wrote {}", path.display());
    Ok(())
}

fn poa(out: &Path, a: PoaArgs) -> Result<()> {
    let (kind, bundle, target) = match a.scenario {
        ScenarioArg::Theorem1Worst => (ScenarioKind::Theorem1Worst, "theorem1", PolicyKind::Myopic),
        ScenarioArg::HidingOver => (ScenarioKind::HidingOver, "hiding_over", PolicyKind::Hiding),
        ScenarioArg::HidingUnder => (ScenarioKind::HidingUnder, "fig3", PolicyKind::Hiding),
        ScenarioArg::CharWorst => (ScenarioKind::CharWorst, "char_worst", PolicyKind::Char),
    };
    let mut exp = load_config(a.common.config.as_deref().unwrap_or(bundle))?;
    exp.scenario = Some(kind);
    {
        let net = exp
            .network
            .as_mut()
            .ok_or_else(|| Error::config("network", "constructions need a parallel network"))?;
        if let Some(m) = a.m {
            if m == 0 {
                return Err(Error::config("m", "need at least one stochastic path").into());
            }
            let first = net.paths[0].clone();
            net.paths = vec![first; m];
            // one stochastic path: the variance-free instance
            if kind == ScenarioKind::CharWorst && m == 1 && a.common.config.is_none() {
                net.variance = VarianceCost::Zero;
            }
        }
    }
    exp.validate()?;
    let mut wb = Workbench::from_config(&exp)?;
    tune(&mut wb, &a.common)?;
    let policy = a.policy.map_or(target, PolicyKind::from);
    let r = wb.poa(policy, PolicyKind::Social, a.run.runs, a.run.horizon, a.run.seed)?;
    write_poa_csv(create(out, "poa.csv")?, std::slice::from_ref(&r))?;
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
    println!("scenario        {}", r.scenario);
    println!("policy          {} vs {}", r.policy, r.reference);
    println!("empirical ratio {:.4}", r.empirical_ratio);
    println!("closed form     {}", opt(r.closed_form_bound));
    println!("psi             {}", opt(r.psi));
    println!("costs           {:.4} ± {:.4} vs {:.4} ± {:.4}", r.mean_cost, r.std_error, r.reference_cost, r.reference_std_error);
    println!("wrote {}", out.join("poa.csv").display());
    Ok(())
}

fn threshold(out: &Path, a: ThresholdArgs) -> Result<()> {
    let mut wb = workbench(&a.common, "fig3")?;
    let r = wb.threshold(a.grid_step)?;
    r.write_csv(create(out, "threshold.csv")?)?;
    println!("x_th            {}", r.x_th.map_or("none".into(), |x| format!("{x:.3}")));
    println!("sign structure  {}", r.sign_change_verified);
    println!("monotone gap    {}", r.monotone_difference);
    println!("wrote {}", out.join("threshold.csv").display());
    Ok(())
}

fn reproduce(out: &Path, a: ReproduceArgs) -> Result<()> {
    let common = Common {
        config: None,
        rho: a.rho,
        grid_beliefs: None,
        tol: None,
    };
    match a.figure {
        Figure::Fig3 => {
            let mut wb = workbench(&common, "fig3")?;
            let r = wb.threshold(0.01)?;
            r.write_csv(create(out, "fig3.csv")?)?;
            println!("x_th {}", r.x_th.map_or("none".into(), |x| format!("{x:.3}")));
            println!("wrote {}", out.join("fig3.csv").display());
        }
        Figure::Fig5 => {
            let mut wb = workbench(&common, "fig5")?;
            let (runs, horizon) = (a.runs.unwrap_or(50), a.horizon.unwrap_or(31));
            let s = vec![
                wb.simulate(PolicyKind::Social, runs, horizon, a.seed)?,
                wb.simulate(PolicyKind::Myopic, runs, horizon, a.seed)?,
            ];
            write_belief_csv(create(out, "fig5.csv")?, wb.network().hazard.xbar_true, &s)?;
            print_costs(&s);
            println!("wrote {}", out.join("fig5.csv").display());
        }
        Figure::Fig7 => {
            let mut cfg = load_config("hybrid")?.hybrid.expect("bundled hybrid network");
            cfg.rho = a.rho.unwrap_or(0.98);
            cfg.validate()?;
            let s = hybrid_costs_by_policy(&cfg, a.runs.unwrap_or(50), a.horizon.unwrap_or(30), a.seed)?;
            write_horizon_csv(create(out, "fig7.csv")?, cfg.rho, &s)?;
            print_costs(&s);
            println!("wrote {}", out.join("fig7.csv").display());
        }
        Figure::Fig8 => {
            let cfg = load_config("hybrid")?.hybrid.expect("bundled hybrid network");
            let rhos: Vec<f64> = match a.rho {
                Some(r) => vec![r],
                None => FIG8_RHOS.to_vec(),
            };
            let rows = inefficiency_sweep(&cfg, &rhos, a.runs.unwrap_or(20), a.horizon.unwrap_or(30), a.seed)?;
            write_inefficiency_csv(create(out, "fig8.csv")?, &rows)?;
            print_ir(&rows);
            println!("wrote {}", out.join("fig8.csv").display());
        }
    }
    Ok(())
}

fn print_ir(rows: &[InefficiencyRow]) {
    println!("{:>6} {:>10} {:>10} {:>10} {:>16}", "rho", "IR myopic", "IR hiding", "IR char", "social cost");
    for r in rows {
        println!(
            "{:>6} {:>10.4} {:>10.4} {:>10.4} {:>16.4}",
            r.rho, r.ir_myopic, r.ir_hiding, r.ir_char, r.social_cost
        );
    }
}
