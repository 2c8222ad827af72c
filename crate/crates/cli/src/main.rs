//! `nlosbp`: experiment runner for cooperative multipath localization.

use std::collections::BTreeMap;
use std::fs;
use std::net::{SocketAddr, UdpSocket};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use nlos_bp::experiments::{
    mean_abs_error_table, run_montecarlo, trial_seed, write_run_artifacts, ArtifactSet, Coord, Engine, Mode,
    MonteCarloRun, DEFAULT_SEED, DEFAULT_TRIALS,
};
use nlos_bp::sim::NoiseModel;
use nlos_bp::transport::{run_agents, RetryPolicy, SensorAgent, TransportKind, UdpLink};
use nlos_bp::{pairwise_baseline, run_sync_rounds, NetworkScenario, ScatterFamily, ScenarioConfig};

#[derive(Parser)]
#[command(name = "nlosbp", version, about = "Cooperative sensor localization from single-bounce multipath")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Localize once from a single noise draw and print the estimates.
    Run(RunArgs),
    /// Monte-Carlo trials; writes every artifact.
    Montecarlo(ExperimentArgs),
    /// Monte-Carlo trials; writes per-node error CDFs.
    Cdf(ExperimentArgs),
    /// Monte-Carlo trials; writes and prints the mean-error table.
    Table(ExperimentArgs),
    /// Monte-Carlo trials; writes the per-iteration mean error.
    Convergence(ExperimentArgs),
    /// Print the five-node preset as a scenario file with reflectors resolved.
    PaperPreset(PresetArgs),
    /// Run one sensor as its own process over UDP.
    Agent(AgentArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Coop,
    Pairwise,
    Both,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Coop => Mode::Coop,
            ModeArg::Pairwise => Mode::Pairwise,
            ModeArg::Both => Mode::Both,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TransportArg {
    Inproc,
    Udp,
}

impl TransportArg {
    fn kind(self) -> TransportKind {
        match self {
            TransportArg::Inproc => TransportKind::InProcess,
            TransportArg::Udp => TransportKind::UdpLoopback(RetryPolicy::default()),
        }
    }

    fn tag(self) -> &'static str {
        match self {
            TransportArg::Inproc => "inproc",
            TransportArg::Udp => "udp",
        }
    }
}

/// Where the scenario comes from and how noisy it is.
#[derive(Args, Clone)]
struct ScenarioArgs {
    /// Scenario file; the five-node preset is used when absent.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed for reflector sampling (preset only) and noise draws.
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Range noise variance, m^2.
    #[arg(long)]
    sigma2: Option<f64>,
    /// Half-width of the uniform bearing error, degrees.
    #[arg(long = "aoa-deg")]
    aoa_deg: Option<f64>,
    /// Scatterer orientations for the preset: orthogonal, biorthogonal or
    /// a comma-separated degree list such as `angles:0,20`.
    #[arg(long, default_value = "orthogonal", value_parser = parse_scatter)]
    scatter: ScatterFamily,
}

fn parse_scatter(s: &str) -> Result<ScatterFamily, String> {
    match s {
        "orthogonal" => Ok(ScatterFamily::Orthogonal),
        "biorthogonal" => Ok(ScatterFamily::Biorthogonal),
        _ => {
            let list = s
                .strip_prefix("angles:")
                .or_else(|| s.strip_prefix("angles="))
                .ok_or_else(|| format!("unknown scatter family `{s}`"))?;
            let angles = list
                .split(',')
                .map(|a| a.trim().parse::<f64>().map_err(|e| format!("bad angle `{a}`: {e}")))
                .collect::<Result<Vec<_>, _>>()?;
            if angles.is_empty() {
                return Err("empty angle list".into());
            }
            Ok(ScatterFamily::Angles(angles))
        }
    }
}

impl ScenarioArgs {
    fn load(&self) -> Result<ScenarioConfig> {
        let mut cfg = match &self.config {
            Some(path) => ScenarioConfig::load(path)?,
            None => ScenarioConfig::paper_preset(self.scatter.clone(), NoiseModel::reference(), self.seed),
        };
        if let Some(s2) = self.sigma2 {
            cfg.noise.sigma2_range = s2;
        }
        if let Some(a) = self.aoa_deg {
            cfg.noise.aoa_halfwidth_deg = a;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    /// Execute the cooperative rounds as agents over this transport.
    #[arg(long)]
    transport: Option<TransportArg>,
    #[arg(long, value_enum, default_value = "both")]
    mode: ModeArg,
    /// Also write the result as JSON into this directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[arg(long, default_value_t = DEFAULT_TRIALS)]
    trials: usize,
    #[arg(long, value_enum, default_value = "both")]
    mode: ModeArg,
    /// Execute the cooperative rounds as agents over this transport
    /// (fixed round count, much slower). Default: in-memory engine.
    #[arg(long)]
    transport: Option<TransportArg>,
    #[arg(long, value_name = "DIR", default_value = "nlosbp-out")]
    out: PathBuf,
}

#[derive(Args)]
struct PresetArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    /// Write the scenario here instead of stdout.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AgentArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    /// This agent's node id.
    #[arg(long)]
    id: usize,
    /// Local UDP address to bind.
    #[arg(long)]
    bind: SocketAddr,
    /// Neighbor address as `ID=HOST:PORT`; repeat for every neighbor.
    #[arg(long = "peer", value_parser = parse_peer)]
    peers: Vec<(usize, SocketAddr)>,
    /// Noise draw to localize against.
    #[arg(long, default_value_t = 0)]
    trial: usize,
    /// Rounds to run; defaults to the scenario's iteration cap.
    #[arg(long)]
    rounds: Option<u32>,
    #[arg(long, default_value_t = 10)]
    retries: u32,
    #[arg(long = "retry-ms", default_value_t = 200)]
    retry_ms: u64,
}

fn parse_peer(s: &str) -> Result<(usize, SocketAddr), String> {
    let (id, addr) = s.split_once('=').ok_or("expected ID=HOST:PORT")?;
    Ok((
        id.parse().map_err(|e| format!("bad id `{id}`: {e}"))?,
        addr.parse().map_err(|e| format!("bad address `{addr}`: {e}"))?,
    ))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match dispatch(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Run(a) => run_once(a),
        Command::Montecarlo(a) => experiment(a, ArtifactSet::ALL),
        Command::Cdf(a) => experiment(
            a,
            ArtifactSet {
                errors: false,
                cdf: true,
                table: false,
                convergence: false,
            },
        ),
        Command::Table(a) => experiment(
            a,
            ArtifactSet {
                errors: false,
                cdf: false,
                table: true,
                convergence: false,
            },
        ),
        Command::Convergence(mut a) => {
            a.mode = ModeArg::Coop;
            experiment(
                a,
                ArtifactSet {
                    errors: false,
                    cdf: false,
                    table: false,
                    convergence: true,
                },
            )
        }
        Command::PaperPreset(a) => paper_preset(a),
        Command::Agent(a) => agent(a),
    }
}

fn build(cfg: &ScenarioConfig) -> Result<NetworkScenario> {
    cfg.build().context("building scenario")
}

fn position_json(p: &nlos_bp::Position) -> serde_json::Value {
    json!([p.x, p.y])
}

fn run_once(a: RunArgs) -> Result<()> {
    let cfg = a.scenario.load()?;
    let scenario = build(&cfg)?;
    let bp = cfg.bp_config();
    let mode = Mode::from(a.mode);
    let mut rng = ChaCha8Rng::seed_from_u64(trial_seed(a.scenario.seed, 0));
    let net = scenario.noisy_constraints(&bp.geometry, &mut rng)?;

    let mut out = serde_json::Map::new();
    out.insert(
        "truth".into(),
        scenario.true_positions.iter().map(position_json).collect(),
    );
    if mode.includes(nlos_bp::experiments::Scheme::Cooperative) {
        let (history, converged) = match a.transport {
            None => {
                let run = run_sync_rounds(&net, &bp)?;
                (run.history, Some(run.converged))
            }
            Some(t) => (run_agents(&net, &bp, &t.kind())?.history, None),
        };
        let last = history.last().expect("history starts with the prior");
        out.insert(
            "cooperative".into(),
            json!({
                "estimates": last.iter().map(|b| position_json(&b.estimate())).collect::<Vec<_>>(),
                "covariances": last.iter().map(|b| json!([b.covariance[(0, 0)], b.covariance[(0, 1)], b.covariance[(1, 1)]])).collect::<Vec<_>>(),
                "iterations": history.len() - 1,
                "converged": converged,
                "transport": a.transport.map_or("none", TransportArg::tag),
            }),
        );
    }
    if mode.includes(nlos_bp::experiments::Scheme::Pairwise) {
        let est = pairwise_baseline(&net)?;
        out.insert("pairwise".into(), est.iter().map(position_json).collect());
    }
    let text = serde_json::to_string_pretty(&serde_json::Value::Object(out))?;
    println!("{text}");
    if let Some(dir) = a.out {
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        write(&dir.join("run.json"), &(text + "\n"))?;
        write(&dir.join("config.json"), &(cfg.resolved(&scenario).to_json_pretty() + "\n"))?;
    }
    Ok(())
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn experiment(a: ExperimentArgs, which: ArtifactSet) -> Result<()> {
    if a.trials == 0 {
        bail!("--trials must be at least 1");
    }
    let cfg = a.scenario.load()?;
    let t0 = Instant::now();
    let scenario = build(&cfg)?;
    let bp = cfg.bp_config();
    let engine = a.transport.map_or(Engine::Sync, |t| Engine::Agents(t.kind()));
    let t1 = Instant::now();
    let run = run_montecarlo(&scenario, &bp, &engine, a.mode.into(), a.trials, a.scenario.seed)?;
    let t2 = Instant::now();

    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write(&a.out.join("config.json"), &(cfg.resolved(&scenario).to_json_pretty() + "\n"))?;
    let mut files = write_run_artifacts(&a.out, &run, which)?;
    let t3 = Instant::now();
    files.push("config.json".into());
    files.push("run_meta.json".into());
    let meta = run_meta(&a, &cfg, &run, [t1 - t0, t2 - t1, t3 - t2]);
    write(&a.out.join("run_meta.json"), &(serde_json::to_string_pretty(&meta)? + "\n"))?;

    if which.table {
        print_table(&run)?;
    }
    info!("wrote {} files to {}", files.len(), a.out.display());
    eprintln!(
        "{} trials in {:.2} s; artifacts in {}",
        a.trials,
        (t2 - t1).as_secs_f64(),
        a.out.display()
    );
    Ok(())
}

fn run_meta(a: &ExperimentArgs, cfg: &ScenarioConfig, run: &MonteCarloRun, d: [Duration; 3]) -> serde_json::Value {
    let iters = &run.iterations;
    json!({
        "seed": a.scenario.seed,
        "scenario_seed": cfg.seed,
        "trials": a.trials,
        "mode": Mode::from(a.mode),
        "engine": a.transport.map_or("sync", TransportArg::tag),
        "sigma2_range": cfg.noise.sigma2_range,
        "aoa_halfwidth_deg": cfg.noise.aoa_halfwidth_deg,
        "bp_sigma2": cfg.bp_config().sigma2,
        "durations_s": {
            "scenario": d[0].as_secs_f64(),
            "trials": d[1].as_secs_f64(),
            "write": d[2].as_secs_f64(),
        },
        "iterations": {
            "mean": iters.iter().sum::<usize>() as f64 / iters.len().max(1) as f64,
            "max": iters.iter().copied().max().unwrap_or(0),
            "converged_trials": run.converged.iter().filter(|&&c| c).count(),
        },
        "max_mean_norm": run.max_mean_norm,
        "version": env!("CARGO_PKG_VERSION"),
    })
}

fn print_table(run: &MonteCarloRun) -> Result<()> {
    let rows = mean_abs_error_table(run.samples.values())?;
    println!("{:<12} {:>5} {:>12} {:>12}", "scheme", "node", "|x err| m", "|y err| m");
    for r in rows {
        println!(
            "{:<12} {:>5} {:>12.4} {:>12.4}",
            r.scheme.tag(),
            format!("S{}", r.node),
            r.mean_abs_x,
            r.mean_abs_y
        );
    }
    for s in run.samples.values() {
        println!(
            "{:<12} {:>5} {:>12.4} {:>12.4}",
            s.scheme.tag(),
            "all",
            s.overall_mean(Coord::X),
            s.overall_mean(Coord::Y)
        );
    }
    Ok(())
}

fn paper_preset(a: PresetArgs) -> Result<()> {
    let cfg = a.scenario.load()?;
    let scenario = build(&cfg)?;
    let text = cfg.resolved(&scenario).to_json_pretty() + "\n";
    match a.out {
        Some(path) => write(&path, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn agent(a: AgentArgs) -> Result<()> {
    let cfg = a.scenario.load()?;
    let scenario = build(&cfg)?;
    let bp = cfg.bp_config();
    if a.id >= scenario.node_count() {
        bail!("node id {} out of range (scenario has {} nodes)", a.id, scenario.node_count());
    }
    // every process draws the same noise realization from the shared seed
    let mut rng = ChaCha8Rng::seed_from_u64(trial_seed(a.scenario.seed, a.trial));
    let net = scenario.noisy_constraints(&bp.geometry, &mut rng)?;
    let alpha = bp.resolve_alpha(&net)?;
    let mut agent = SensorAgent::new(&net, a.id, bp.sigma2, alpha)?;

    // extra peers are fine, the link only talks to neighbors
    let given: BTreeMap<usize, SocketAddr> = a.peers.into_iter().collect();
    let mut peers = BTreeMap::new();
    for n in agent.neighbors() {
        let Some(&addr) = given.get(&n) else {
            bail!("no --peer given for neighbor {n}");
        };
        peers.insert(n, addr);
    }
    let socket = UdpSocket::bind(a.bind).with_context(|| format!("binding {}", a.bind))?;
    let policy = RetryPolicy {
        retries: a.retries,
        interval: Duration::from_millis(a.retry_ms),
    };
    let mut link = UdpLink::new(a.id, socket, peers, policy)?;
    let rounds = a
        .rounds
        .unwrap_or_else(|| u32::try_from(bp.max_iters).unwrap_or(u32::MAX));
    let history = agent.run(&mut link, rounds)?;
    let last = history.last().expect("history starts with the prior");
    println!(
        "{}",
        json!({
            "node": a.id,
            "rounds": rounds,
            "estimate": position_json(&last.estimate()),
            "covariance": [last.covariance[(0, 0)], last.covariance[(0, 1)], last.covariance[(1, 1)]],
            "truth": position_json(&scenario.true_positions[a.id]),
        })
    );
    Ok(())
}
