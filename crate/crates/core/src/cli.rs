//! Command-line front end: `simulate`, `localize` and `experiment`.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 malformed input or usage,
//! 3 localization failure.

use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::Error;
use crate::experiment::{self, SweepKind, SweepSpec, CSV_SCHEMA};
use crate::pipeline::{evaluate, localize, PipelineConfig, ResultDocument};
use crate::scene::{
    generate_scene, inject_false, remove_measurements, synthesize_measurements, NoiseSpec, Room,
    SceneDocument,
};
use crate::seed::rng_from;
use crate::transport::{ColumnScore, SolveDiagnostics, Sweep};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Pipeline(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io(_) => 1,
            CliError::Input(_) => 2,
            CliError::Pipeline(_) => 3,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::LocalizationFailed(_) | Error::TooFewCandidates { .. } => {
                CliError::Pipeline(e.to_string())
            }
            Error::Io(_) | Error::Csv(_) => CliError::Io(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "tdoa-assoc",
    version,
    about = "Multi-source TDOA localization with transport-based data association"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw a random scene and write it with its measurements as JSON.
    Simulate(SimulateArgs),
    /// Localize sources from a scene JSON file and report the result as JSON.
    Localize(LocalizeArgs),
    /// Run a Monte-Carlo sweep and write one CSV row per grid point.
    #[command(after_help = CSV_SCHEMA)]
    Experiment(ExperimentArgs),
}

fn parse_room(s: &str) -> std::result::Result<Room, String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    match parts[..] {
        [x, y, z] if [x, y, z].iter().all(|v| *v > 0.0 && v.is_finite()) => Ok(Room([x, y, z])),
        _ => Err("expected three positive numbers Lx,Ly,Lz".into()),
    }
}

/// Settings shared by all subcommands. Flags override the `--config` file,
/// which overrides the built-in defaults.
#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// TOML file with any of the flag names below as keys (dashes become
    /// underscores).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// TDOA noise standard deviation, meters.
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub receivers: Option<usize>,
    #[arg(long)]
    pub sources: Option<usize>,
    /// Room extent as Lx,Ly,Lz in meters.
    #[arg(long, value_parser = parse_room)]
    pub room: Option<Room>,
    /// Number of receiver-pair index sets K.
    #[arg(long)]
    pub k_sets: Option<usize>,
    /// Column-sparsity weight.
    #[arg(long)]
    pub eta: Option<f64>,
    /// Entropy weight.
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Transport solver iteration cap.
    #[arg(long)]
    pub max_iter: Option<usize>,
    /// Block order of the transport solver.
    #[arg(long, value_enum)]
    pub update_order: Option<UpdateOrder>,
    /// How source columns are ranked in the transport plan.
    #[arg(long, value_enum)]
    pub column_score: Option<ColumnScore>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum UpdateOrder {
    Columnwise,
    Alternating,
}

impl From<UpdateOrder> for Sweep {
    fn from(u: UpdateOrder) -> Self {
        match u {
            UpdateOrder::Columnwise => Sweep::Columnwise,
            UpdateOrder::Alternating => Sweep::Alternating,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub sigma: Option<f64>,
    pub receivers: Option<usize>,
    pub sources: Option<usize>,
    pub room: Option<[f64; 3]>,
    pub k_sets: Option<usize>,
    pub eta: Option<f64>,
    pub epsilon: Option<f64>,
    pub max_iter: Option<usize>,
    pub update_order: Option<UpdateOrder>,
    pub column_score: Option<ColumnScore>,
    pub false_measurements: Option<usize>,
    pub missing_measurements: Option<usize>,
    pub trials: Option<usize>,
}

fn read_config(path: Option<&Path>) -> CliResult<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

/// Flag values merged over the config file.
#[derive(Debug, Clone)]
struct Settings {
    seed: u64,
    sigma: Option<f64>,
    receivers: usize,
    sources: Option<usize>,
    room: Room,
    pipeline: PipelineConfig,
    file: FileConfig,
}

fn settings(c: &CommonArgs) -> CliResult<Settings> {
    let file = read_config(c.config.as_deref())?;
    let mut pipeline = PipelineConfig::default();
    if let Some(k) = c.k_sets.or(file.k_sets) {
        pipeline.sets = k;
    }
    if let Some(e) = c.eta.or(file.eta) {
        pipeline.solver.eta = e;
    }
    if let Some(e) = c.epsilon.or(file.epsilon) {
        pipeline.solver.epsilon = e;
    }
    if let Some(m) = c.max_iter.or(file.max_iter) {
        pipeline.solver.max_iter = m;
    }
    if let Some(u) = c.update_order.or(file.update_order) {
        pipeline.solver.sweep = u.into();
    }
    if let Some(c) = c.column_score.or(file.column_score) {
        pipeline.column_score = c;
    }
    let room = match (c.room, file.room) {
        (Some(r), _) => r,
        (None, Some(r)) => {
            parse_room(&format!("{},{},{}", r[0], r[1], r[2])).map_err(CliError::Input)?
        }
        (None, None) => Room::default(),
    };
    Ok(Settings {
        seed: c.seed.or(file.seed).unwrap_or(0),
        sigma: c.sigma.or(file.sigma),
        receivers: c.receivers.or(file.receivers).unwrap_or(12),
        sources: c.sources.or(file.sources),
        room,
        pipeline,
        file,
    })
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn write_output(
    path: Option<&Path>,
    f: impl FnOnce(&mut dyn Write) -> io::Result<()>,
) -> CliResult<()> {
    let res = match path {
        Some(p) => {
            let mut w = create(p)?;
            f(&mut w).and_then(|_| w.flush())
        }
        None => {
            let stdout = io::stdout();
            let mut lock = stdout.lock();
            f(&mut lock)
        }
    };
    res.map_err(|e| CliError::Io(e.to_string()))
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Number of false measurements to inject.
    #[arg(long = "false")]
    pub false_measurements: Option<usize>,
    /// Number of measurements to delete.
    #[arg(long = "missing")]
    pub missing_measurements: Option<usize>,
    /// Output JSON path; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn cmd_simulate(a: &SimulateArgs) -> CliResult<()> {
    let s = settings(&a.common)?;
    let sigma = s.sigma.unwrap_or(0.03);
    let sources = s.sources.unwrap_or(3);
    let n_false = a
        .false_measurements
        .or(s.file.false_measurements)
        .unwrap_or(0);
    let n_missing = a
        .missing_measurements
        .or(s.file.missing_measurements)
        .unwrap_or(0);

    let mut rng = rng_from(&[s.seed]);
    let scene = generate_scene(s.receivers, sources, s.room, &mut rng)?;
    let ms = synthesize_measurements(&scene, NoiseSpec { sigma }, &mut rng)?;
    let ms = inject_false(&ms, n_false, &mut rng)?;
    let ms = remove_measurements(&ms, n_missing, &mut rng)?;

    let doc = SceneDocument::from_parts(&scene, &ms);
    write_output(a.out.as_deref(), |w| {
        serde_json::to_writer_pretty(&mut *w, &doc)?;
        writeln!(w)
    })?;
    eprintln!(
        "R={} S={} |T|={} (false {}, missing {}, sigma {})",
        scene.receivers.len(),
        scene.sources.len(),
        ms.len(),
        n_false,
        n_missing,
        sigma
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct LocalizeArgs {
    /// Scene JSON as written by `simulate`. Sources and truth tags are
    /// optional; when present, metrics are reported.
    pub input: PathBuf,
    #[command(flatten)]
    pub common: CommonArgs,
    /// Output JSON path; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write per-solve diagnostics (iterations, residual and objective
    /// traces, selected columns) as JSON.
    #[arg(long)]
    pub dump_solver: Option<PathBuf>,
}

#[derive(Serialize)]
struct SolverDump<'a> {
    selected_columns: &'a [usize],
    selection: &'a SolveDiagnostics,
    reassociation: &'a SolveDiagnostics,
}

pub fn cmd_localize(a: &LocalizeArgs) -> CliResult<()> {
    let s = settings(&a.common)?;
    let text = std::fs::read_to_string(&a.input)
        .map_err(|e| CliError::Input(format!("{}: {e}", a.input.display())))?;
    let doc: SceneDocument = serde_json::from_str(&text)
        .map_err(|e| CliError::Input(format!("{}: {e}", a.input.display())))?;
    let (scene, ms) = doc.into_parts()?;

    let mut cfg = s.pipeline;
    cfg.sigma = s.sigma.unwrap_or(0.03);
    cfg.sources = match (s.sources, scene.sources.len()) {
        (Some(n), _) => n,
        (None, 0) => 3,
        (None, n) => n,
    };
    let mut rng = rng_from(&[s.seed]);
    let loc = localize(&ms, &scene.receivers, &cfg, &mut rng)?;

    let metrics =
        if !scene.sources.is_empty() && scene.sources.len() == cfg.sources && ms.has_truth() {
            Some(evaluate(&loc.estimates, &loc.assignment, &scene, &ms)?)
        } else {
            None
        };

    if let Some(p) = &a.dump_solver {
        let dump = SolverDump {
            selected_columns: &loc.diagnostics.selected_candidates,
            selection: &loc.selection_solve,
            reassociation: &loc.reassociation_solve,
        };
        write_output(Some(p), |w| {
            serde_json::to_writer_pretty(w, &dump).map_err(io::Error::other)
        })?;
    }

    let result = ResultDocument::new(&loc, metrics.clone());
    write_output(a.out.as_deref(), |w| {
        serde_json::to_writer_pretty(&mut *w, &result)?;
        writeln!(w)
    })?;

    for (i, e) in loc.estimates.iter().enumerate() {
        eprintln!("source {i}: ({:.4}, {:.4}, {:.4})", e.x, e.y, e.z);
    }
    let d = &loc.diagnostics;
    eprintln!(
        "candidates {}, solver {} iterations (converged: {}), retries {}",
        d.candidates, d.selection_solve.iterations, d.selection_solve.converged, d.retries
    );
    if let Some(m) = metrics {
        eprintln!(
            "mean error {:.3e} m, association rate {:.4}",
            m.mean_error, m.association_rate
        );
        if let Some(f) = m.false_to_void_rate {
            eprintln!("false-to-void rate {f:.4}");
        }
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    #[arg(long, value_enum)]
    pub sweep: SweepKind,
    /// Comma-separated grid values (σ in meters, or measurement counts).
    #[arg(long, value_delimiter = ',', conflicts_with = "step")]
    pub grid: Option<Vec<f64>>,
    /// Noise sweep only: grid step over [0.01, 0.19].
    #[arg(long)]
    pub step: Option<f64>,
    /// Trials per grid point.
    #[arg(long)]
    pub trials: Option<usize>,
    #[command(flatten)]
    pub common: CommonArgs,
    /// Output CSV path; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn step_grid(step: f64) -> CliResult<Vec<f64>> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(CliError::Input(format!(
            "step must be positive, got {step}"
        )));
    }
    let n = ((0.19 - 0.01) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| 0.01 + i as f64 * step).collect())
}

pub fn cmd_experiment(a: &ExperimentArgs) -> CliResult<()> {
    let s = settings(&a.common)?;
    let mut spec = SweepSpec::new(a.sweep, s.seed);
    if let Some(g) = &a.grid {
        spec.grid = g.clone();
    } else if let Some(step) = a.step {
        if a.sweep != SweepKind::Noise {
            return Err(CliError::Input(
                "--step applies to the noise sweep only".into(),
            ));
        }
        spec.grid = step_grid(step)?;
    }
    if let Some(t) = a.trials.or(s.file.trials) {
        spec.trials = t;
    }
    if let Some(sigma) = s.sigma {
        spec.sigma = sigma;
    }
    spec.receivers = s.receivers;
    spec.room = s.room;
    spec.pipeline = s.pipeline;
    if let Some(n) = s.sources {
        spec.pipeline.sources = n;
    }
    spec.validate()?;

    // Fail on an unwritable path before spending time on the sweep.
    let writer = a.out.as_deref().map(create).transpose()?;
    let outcomes = experiment::run_sweep(&spec)?;
    let rows = experiment::rows(&spec, &outcomes);
    match writer {
        Some(w) => experiment::write_csv(&rows, w)?,
        None => experiment::write_csv(&rows, io::stdout().lock())?,
    }
    Ok(())
}

pub fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Localize(a) => cmd_localize(a),
        Command::Experiment(a) => cmd_experiment(a),
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn room_parsing() {
        assert_eq!(parse_room("10, 8,2.5").unwrap(), Room([10.0, 8.0, 2.5]));
        assert!(parse_room("1,2").is_err());
        assert!(parse_room("1,-2,3").is_err());
    }

    #[test]
    fn step_grid_matches_default() {
        let g = step_grid(0.02).unwrap();
        let d = experiment::default_noise_grid();
        assert_eq!(g.len(), d.len());
        for (a, b) in g.iter().zip(&d) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(
            &p,
            "eta = 2.0\nepsilon = 1e-5\nseed = 4\nroom = [5.0, 5.0, 2.0]\n",
        )
        .unwrap();
        let c = CommonArgs {
            config: Some(p),
            eta: Some(3.0),
            ..CommonArgs::default()
        };
        let s = settings(&c).unwrap();
        assert_eq!(s.pipeline.solver.eta, 3.0);
        assert_eq!(s.pipeline.solver.epsilon, 1e-5);
        assert_eq!(s.seed, 4);
        assert_eq!(s.room, Room([5.0, 5.0, 2.0]));
    }

    #[test]
    fn unknown_config_key_is_input_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "etaa = 2.0\n").unwrap();
        let err = read_config(Some(&p)).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
