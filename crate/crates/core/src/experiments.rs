//! Monte-Carlo accuracy and convergence experiments.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bp::{run_sync_rounds, BpConfig, BpError, GaussianBelief};
use crate::geometry::Position;
use crate::network::NodeId;
use crate::sim::{pairwise_baseline, trial_rng, NetworkScenario, SimError};
use crate::transport::{run_agents, TransportError, TransportKind};

/// Seed used for both scenario sampling and trials when none is given.
pub const DEFAULT_SEED: u64 = 1;

/// Trial count of the reference experiments.
pub const DEFAULT_TRIALS: usize = 10_000;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("trial {trial}")]
    Scenario {
        trial: usize,
        #[source]
        source: SimError,
    },
    #[error("trial {trial}")]
    Bp {
        trial: usize,
        #[source]
        source: BpError,
    },
    #[error("trial {trial}")]
    Transport {
        trial: usize,
        #[source]
        source: TransportError,
    },
    #[error("no samples")]
    EmptySamples,
    #[error("at least one trial is required")]
    NoTrials,
    #[error("writing {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Cooperative,
    Pairwise,
}

impl Scheme {
    pub fn tag(self) -> &'static str {
        match self {
            Scheme::Cooperative => "cooperative",
            Scheme::Pairwise => "pairwise",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Coop,
    Pairwise,
    Both,
}

impl Mode {
    pub fn includes(self, scheme: Scheme) -> bool {
        matches!(
            (self, scheme),
            (Mode::Both, _) | (Mode::Coop, Scheme::Cooperative) | (Mode::Pairwise, Scheme::Pairwise)
        )
    }
}

/// How the cooperative scheme is executed.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum Engine {
    /// In-memory synchronous rounds, stopping at convergence.
    #[default]
    Sync,
    /// Sensor agents over a transport, running `max_iters` rounds.
    Agents(TransportKind),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Coord {
    X,
    Y,
}

impl Coord {
    pub fn tag(self) -> &'static str {
        match self {
            Coord::X => "x",
            Coord::Y => "y",
        }
    }
}

/// Absolute coordinate errors of one scheme, one entry per trial.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorSamples {
    pub scheme: Scheme,
    /// Non-anchor nodes, ascending.
    pub nodes: Vec<NodeId>,
    /// `abs_x[k][t]` is `|x_hat - x|` of `nodes[k]` in trial `t`.
    pub abs_x: Vec<Vec<f64>>,
    pub abs_y: Vec<Vec<f64>>,
    pub trial_seeds: Vec<u64>,
}

impl ErrorSamples {
    pub fn trials(&self) -> usize {
        self.trial_seeds.len()
    }

    pub fn node_index(&self, node: NodeId) -> Option<usize> {
        self.nodes.iter().position(|&n| n == node)
    }

    pub fn values(&self, k: usize, coord: Coord) -> &[f64] {
        match coord {
            Coord::X => &self.abs_x[k],
            Coord::Y => &self.abs_y[k],
        }
    }

    pub fn mean(&self, node: NodeId, coord: Coord) -> Option<f64> {
        let v = self.values(self.node_index(node)?, coord);
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Mean over all nodes and trials.
    pub fn overall_mean(&self, coord: Coord) -> f64 {
        let all: Vec<f64> = (0..self.nodes.len())
            .flat_map(|k| self.values(k, coord).iter().copied())
            .collect();
        all.iter().sum::<f64>() / all.len().max(1) as f64
    }
}

/// Trial-averaged error of the belief means after every iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceTrace {
    pub mean_abs_x: Vec<f64>,
    pub mean_abs_y: Vec<f64>,
}

impl ConvergenceTrace {
    pub fn len(&self) -> usize {
        self.mean_abs_x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean_abs_x.is_empty()
    }

    /// First iteration `L` such that every later step changes the series by
    /// less than `fraction` of its final value.
    pub fn settling_iteration(series: &[f64], fraction: f64) -> Option<usize> {
        let last = *series.last()?;
        let bound = fraction * last.abs();
        let mut settled = series.len() - 1;
        for l in (1..series.len()).rev() {
            if (series[l] - series[l - 1]).abs() < bound {
                settled = l - 1;
            } else {
                break;
            }
        }
        Some(settled)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloRun {
    pub samples: BTreeMap<Scheme, ErrorSamples>,
    /// Iterations used by the cooperative scheme in each trial.
    pub iterations: Vec<usize>,
    pub converged: Vec<bool>,
    pub trace: Option<ConvergenceTrace>,
    /// Largest belief-mean norm seen in any iteration of any trial.
    pub max_mean_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
struct TrialOutcome {
    cooperative: Option<Vec<Position>>,
    pairwise: Option<Vec<Position>>,
    iterations: usize,
    converged: bool,
    /// Mean over nodes of `|x|`, `|y|` errors per iteration.
    trace: Vec<(f64, f64)>,
    max_mean_norm: f64,
}

/// Seed of trial `trial`; the trial's generator is `ChaCha8Rng::seed_from_u64` of it.
pub fn trial_seed(seed: u64, trial: usize) -> u64 {
    trial_rng(seed, trial as u64).next_u64()
}

fn history_stats(history: &[Vec<GaussianBelief>], truth: &[Position], anchor: NodeId) -> (Vec<(f64, f64)>, f64) {
    let unknown = truth.len().saturating_sub(1).max(1) as f64;
    let mut max_norm: f64 = 0.0;
    let trace = history
        .iter()
        .map(|beliefs| {
            let (mut ex, mut ey) = (0.0, 0.0);
            for (n, b) in beliefs.iter().enumerate() {
                max_norm = max_norm.max(b.mean.norm());
                if n != anchor {
                    ex += (b.mean.x - truth[n].x).abs();
                    ey += (b.mean.y - truth[n].y).abs();
                }
            }
            (ex / unknown, ey / unknown)
        })
        .collect();
    (trace, max_norm)
}

fn run_trial(
    scenario: &NetworkScenario,
    bp: &BpConfig,
    engine: &Engine,
    mode: Mode,
    trial: usize,
    seed: u64,
) -> Result<TrialOutcome, ExperimentError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let network = scenario
        .noisy_constraints(&bp.geometry, &mut rng)
        .map_err(|source| ExperimentError::Scenario { trial, source })?;

    let mut out = TrialOutcome {
        cooperative: None,
        pairwise: None,
        iterations: 0,
        converged: false,
        trace: Vec::new(),
        max_mean_norm: 0.0,
    };
    if mode.includes(Scheme::Cooperative) {
        let (history, converged) = match engine {
            Engine::Sync => {
                let run = run_sync_rounds(&network, bp).map_err(|source| ExperimentError::Bp { trial, source })?;
                (run.history, run.converged)
            }
            Engine::Agents(kind) => {
                let run =
                    run_agents(&network, bp, kind).map_err(|source| ExperimentError::Transport { trial, source })?;
                (run.history, false)
            }
        };
        let (trace, max_norm) = history_stats(&history, &scenario.true_positions, scenario.anchor_index);
        out.iterations = history.len() - 1;
        out.converged = converged;
        out.trace = trace;
        out.max_mean_norm = max_norm;
        out.cooperative = Some(
            history
                .last()
                .expect("non-empty history")
                .iter()
                .map(GaussianBelief::estimate)
                .collect(),
        );
    }
    if mode.includes(Scheme::Pairwise) {
        out.pairwise =
            Some(pairwise_baseline(&network).map_err(|source| ExperimentError::Scenario { trial, source })?);
    }
    Ok(out)
}

/// Runs `trials` independent noise draws on a fixed scenario.
///
/// Trials run in parallel; each draws from its own generator seeded by
/// [`trial_seed`], so results do not depend on scheduling.
pub fn run_montecarlo(
    scenario: &NetworkScenario,
    bp: &BpConfig,
    engine: &Engine,
    mode: Mode,
    trials: usize,
    seed: u64,
) -> Result<MonteCarloRun, ExperimentError> {
    if trials == 0 {
        return Err(ExperimentError::NoTrials);
    }
    let seeds: Vec<u64> = (0..trials).map(|t| trial_seed(seed, t)).collect();
    let outcomes = seeds
        .par_iter()
        .enumerate()
        .map(|(t, &s)| run_trial(scenario, bp, engine, mode, t, s))
        .collect::<Result<Vec<_>, _>>()?;

    let nodes: Vec<NodeId> = (0..scenario.node_count())
        .filter(|&n| n != scenario.anchor_index)
        .collect();
    let truth = &scenario.true_positions;
    let collect = |scheme: Scheme, pick: &dyn Fn(&TrialOutcome) -> &Option<Vec<Position>>| -> Option<ErrorSamples> {
        if !mode.includes(scheme) {
            return None;
        }
        let mut abs_x = vec![Vec::with_capacity(trials); nodes.len()];
        let mut abs_y = vec![Vec::with_capacity(trials); nodes.len()];
        for o in &outcomes {
            let est = pick(o).as_ref().expect("scheme ran in every trial");
            for (k, &n) in nodes.iter().enumerate() {
                abs_x[k].push((est[n].x - truth[n].x).abs());
                abs_y[k].push((est[n].y - truth[n].y).abs());
            }
        }
        Some(ErrorSamples {
            scheme,
            nodes: nodes.clone(),
            abs_x,
            abs_y,
            trial_seeds: seeds.clone(),
        })
    };

    let mut samples = BTreeMap::new();
    if let Some(s) = collect(Scheme::Cooperative, &|o| &o.cooperative) {
        samples.insert(Scheme::Cooperative, s);
    }
    if let Some(s) = collect(Scheme::Pairwise, &|o| &o.pairwise) {
        samples.insert(Scheme::Pairwise, s);
    }

    let trace = mode.includes(Scheme::Cooperative).then(|| aggregate_trace(&outcomes));
    Ok(MonteCarloRun {
        samples,
        iterations: outcomes.iter().map(|o| o.iterations).collect(),
        converged: outcomes.iter().map(|o| o.converged).collect(),
        trace,
        max_mean_norm: outcomes.iter().map(|o| o.max_mean_norm).fold(0.0, f64::max),
    })
}

/// Averages per-trial traces, holding each trial's last value once it stops.
fn aggregate_trace(outcomes: &[TrialOutcome]) -> ConvergenceTrace {
    let len = outcomes.iter().map(|o| o.trace.len()).max().unwrap_or(0);
    let n = outcomes.len() as f64;
    let mut mean_abs_x = vec![0.0; len];
    let mut mean_abs_y = vec![0.0; len];
    for o in outcomes {
        for l in 0..len {
            let (ex, ey) = o.trace[l.min(o.trace.len() - 1)];
            mean_abs_x[l] += ex / n;
            mean_abs_y[l] += ey / n;
        }
    }
    ConvergenceTrace { mean_abs_x, mean_abs_y }
}

/// Per-iteration mean absolute error of the cooperative scheme.
pub fn convergence_trace(
    scenario: &NetworkScenario,
    bp: &BpConfig,
    trials: usize,
    seed: u64,
) -> Result<ConvergenceTrace, ExperimentError> {
    let run = run_montecarlo(scenario, bp, &Engine::Sync, Mode::Coop, trials, seed)?;
    Ok(run.trace.expect("cooperative mode records a trace"))
}

/// Step of an empirical CDF: `fraction` of the samples are `<= error`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CdfPoint {
    pub node: NodeId,
    pub coord: Coord,
    pub error: f64,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CdfTable {
    pub scheme: Scheme,
    pub points: Vec<CdfPoint>,
}

impl CdfTable {
    /// Fraction of samples of `node`/`coord` that are `<= x`.
    pub fn evaluate(&self, node: NodeId, coord: Coord, x: f64) -> f64 {
        self.points
            .iter()
            .filter(|p| p.node == node && p.coord == coord && p.error <= x)
            .map(|p| p.fraction)
            .fold(0.0, f64::max)
    }
}

/// Sorted-sample CDF of one series; tied values collapse into one step.
pub fn cdf_steps(values: &[f64]) -> Vec<(f64, f64)> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut steps = Vec::new();
    for (k, &v) in sorted.iter().enumerate() {
        if sorted.get(k + 1) != Some(&v) {
            steps.push((v, (k + 1) as f64 / n));
        }
    }
    steps
}

pub fn empirical_cdf(samples: &ErrorSamples) -> Result<CdfTable, ExperimentError> {
    if samples.nodes.is_empty() || samples.trials() == 0 {
        return Err(ExperimentError::EmptySamples);
    }
    let mut points = Vec::new();
    for (k, &node) in samples.nodes.iter().enumerate() {
        for coord in [Coord::X, Coord::Y] {
            points.extend(cdf_steps(samples.values(k, coord)).into_iter().map(|(error, fraction)| CdfPoint {
                node,
                coord,
                error,
                fraction,
            }));
        }
    }
    Ok(CdfTable {
        scheme: samples.scheme,
        points,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanErrorRow {
    pub scheme: Scheme,
    pub node: NodeId,
    pub mean_abs_x: f64,
    pub mean_abs_y: f64,
}

pub fn mean_abs_error_table<'a>(
    samples: impl IntoIterator<Item = &'a ErrorSamples>,
) -> Result<Vec<MeanErrorRow>, ExperimentError> {
    let mut rows = Vec::new();
    for s in samples {
        if s.trials() == 0 {
            return Err(ExperimentError::EmptySamples);
        }
        for &node in &s.nodes {
            rows.push(MeanErrorRow {
                scheme: s.scheme,
                node,
                mean_abs_x: s.mean(node, Coord::X).expect("node present"),
                mean_abs_y: s.mean(node, Coord::Y).expect("node present"),
            });
        }
    }
    if rows.is_empty() {
        return Err(ExperimentError::EmptySamples);
    }
    Ok(rows)
}

/// Formats with six significant digits, `%g` style.
pub fn format_sig6(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    if !v.is_finite() {
        return format!("{v}");
    }
    let sci = format!("{v:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        trim_zeros(&format!("{v:.decimals$}")).to_string()
    } else {
        format!("{}e{}{:02}", trim_zeros(mantissa), if exp < 0 { '-' } else { '+' }, exp.abs())
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub const ERRORS_HEADER: &str = "trial,trial_seed,node,abs_err_x,abs_err_y";
pub const CDF_HEADER: &str = "scheme,node,coord,error,cdf";
pub const MEAN_ERRORS_HEADER: &str = "scheme,node,mean_abs_err_x,mean_abs_err_y";
pub const CONVERGENCE_HEADER: &str = "iteration,mean_abs_err_x,mean_abs_err_y";

pub fn errors_csv(samples: &ErrorSamples) -> String {
    let mut out = format!("{ERRORS_HEADER}\n");
    for (t, seed) in samples.trial_seeds.iter().enumerate() {
        for (k, node) in samples.nodes.iter().enumerate() {
            let _ = writeln!(
                out,
                "{t},{seed},{node},{},{}",
                format_sig6(samples.abs_x[k][t]),
                format_sig6(samples.abs_y[k][t])
            );
        }
    }
    out
}

pub fn cdf_csv(table: &CdfTable) -> String {
    let mut out = format!("{CDF_HEADER}\n");
    for p in &table.points {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            table.scheme.tag(),
            p.node,
            p.coord.tag(),
            format_sig6(p.error),
            format_sig6(p.fraction)
        );
    }
    out
}

pub fn mean_errors_csv(rows: &[MeanErrorRow]) -> String {
    let mut out = format!("{MEAN_ERRORS_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            r.scheme.tag(),
            r.node,
            format_sig6(r.mean_abs_x),
            format_sig6(r.mean_abs_y)
        );
    }
    out
}

pub fn convergence_csv(trace: &ConvergenceTrace) -> String {
    let mut out = format!("{CONVERGENCE_HEADER}\n");
    for l in 0..trace.len() {
        let _ = writeln!(
            out,
            "{l},{},{}",
            format_sig6(trace.mean_abs_x[l]),
            format_sig6(trace.mean_abs_y[l])
        );
    }
    out
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<(), ExperimentError> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|source| ExperimentError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Which CSV artifacts [`write_run_artifacts`] emits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArtifactSet {
    pub errors: bool,
    pub cdf: bool,
    pub table: bool,
    pub convergence: bool,
}

impl ArtifactSet {
    pub const ALL: ArtifactSet = ArtifactSet {
        errors: true,
        cdf: true,
        table: true,
        convergence: true,
    };
}

/// Writes the CSV artifacts of `run` into `dir` (created if missing).
pub fn write_run_artifacts(dir: &Path, run: &MonteCarloRun, which: ArtifactSet) -> Result<Vec<String>, ExperimentError> {
    fs::create_dir_all(dir).map_err(|source| ExperimentError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let mut written = Vec::new();
    for (scheme, samples) in &run.samples {
        if which.errors {
            let name = format!("errors_{}.csv", scheme.tag());
            write_file(dir, &name, &errors_csv(samples))?;
            written.push(name);
        }
        if which.cdf {
            let name = format!("cdf_{}.csv", scheme.tag());
            write_file(dir, &name, &cdf_csv(&empirical_cdf(samples)?))?;
            written.push(name);
        }
    }
    if which.table {
        let rows = mean_abs_error_table(run.samples.values())?;
        write_file(dir, "mean_errors.csv", &mean_errors_csv(&rows))?;
        written.push("mean_errors.csv".into());
    }
    if which.convergence {
        if let Some(trace) = &run.trace {
            write_file(dir, "convergence.csv", &convergence_csv(trace))?;
            written.push("convergence.csv".into());
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn samples(values: &[f64]) -> ErrorSamples {
        ErrorSamples {
            scheme: Scheme::Cooperative,
            nodes: vec![1],
            abs_x: vec![values.to_vec()],
            abs_y: vec![values.to_vec()],
            trial_seeds: (0..values.len() as u64).collect(),
        }
    }

    #[test]
    fn cdf_of_three_points() {
        let t = empirical_cdf(&samples(&[3.0, 1.0, 2.0])).unwrap();
        let xs: Vec<(f64, f64)> = t
            .points
            .iter()
            .filter(|p| p.coord == Coord::X)
            .map(|p| (p.error, p.fraction))
            .collect();
        assert_eq!(xs, vec![(1.0, 1.0 / 3.0), (2.0, 2.0 / 3.0), (3.0, 1.0)]);
        assert_eq!(t.evaluate(1, Coord::X, f64::INFINITY), 1.0);
        assert_eq!(t.evaluate(1, Coord::X, 0.5), 0.0);
    }

    #[test]
    fn cdf_of_tied_samples_is_one_step() {
        assert_eq!(cdf_steps(&[2.0, 2.0, 2.0]), vec![(2.0, 1.0)]);
    }

    #[test]
    fn empty_samples_are_rejected() {
        let empty = samples(&[]);
        assert!(matches!(empirical_cdf(&empty), Err(ExperimentError::EmptySamples)));
        assert!(matches!(mean_abs_error_table([&empty]), Err(ExperimentError::EmptySamples)));
    }

    #[test]
    fn constant_error_mean() {
        let rows = mean_abs_error_table([&samples(&[2.0; 10])]).unwrap();
        assert_eq!(rows[0].mean_abs_x, 2.0);
        assert_eq!(rows[0].mean_abs_y, 2.0);
    }

    #[test]
    fn sig6_formatting() {
        assert_eq!(format_sig6(1.0048), "1.0048");
        assert_eq!(format_sig6(0.0), "0");
        assert_eq!(format_sig6(2.0), "2");
        assert_eq!(format_sig6(123456789.0), "1.23457e+08");
        assert_eq!(format_sig6(0.000012345678), "1.23457e-05");
        assert_eq!(format_sig6(9.9999996), "10");
        assert_eq!(format_sig6(-0.5), "-0.5");
        assert_eq!(format_sig6(1.0 / 3.0), "0.333333");
    }

    #[test]
    fn settling_iteration() {
        let s = [10.0, 5.0, 2.0, 1.01, 1.0, 1.0];
        assert_eq!(ConvergenceTrace::settling_iteration(&s, 0.01), Some(4));
        assert_eq!(ConvergenceTrace::settling_iteration(&[1.0], 0.01), Some(0));
    }

    #[test]
    fn csv_headers() {
        let s = samples(&[1.0, 2.0]);
        assert!(errors_csv(&s).starts_with("trial,trial_seed,node,abs_err_x,abs_err_y\n"));
        assert!(cdf_csv(&empirical_cdf(&s).unwrap()).starts_with("scheme,node,coord,error,cdf\ncooperative,1,x,1,0.5\n"));
    }
}
