//! Seeded Monte-Carlo sweeps over noise level or corruption count.
//!
//! Each trial draws a fresh scene and measurement set from its own stream,
//! `seed::derive(&[master, grid_index, trial_index])`, so any cell of the
//! output can be reproduced in isolation and results do not depend on the
//! number of worker threads.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::crlb::root_crlb;
use crate::error::{Error, Result};
use crate::pipeline::{evaluate, localize, match_estimates, PipelineConfig};
use crate::scene::{
    generate_scene, inject_false, remove_measurements, synthesize_measurements, NoiseSpec,
    ReceiverPair, Room,
};
use crate::seed::rng_from;

/// Environment variable capping the worker thread count.
pub const THREADS_ENV: &str = "TDOA_ASSOC_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SweepKind {
    /// Grid over the TDOA noise level σ (meters).
    Noise,
    /// Grid over the number of injected false measurements.
    False,
    /// Grid over the number of deleted measurements.
    Missing,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepSpec {
    pub kind: SweepKind,
    pub grid: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
    /// Noise level for the corruption sweeps; ignored by the noise sweep.
    pub sigma: f64,
    pub receivers: usize,
    pub room: Room,
    /// `sources` and the solver settings are taken from here; `sigma` is
    /// overwritten per grid point.
    pub pipeline: PipelineConfig,
}

/// σ ∈ {0.01, 0.03, …, 0.19}.
pub fn default_noise_grid() -> Vec<f64> {
    (0..10).map(|i| (1 + 2 * i) as f64 / 100.0).collect()
}

/// N ∈ {0, 2, …, 22}.
pub fn default_count_grid() -> Vec<f64> {
    (0..12).map(|i| (2 * i) as f64).collect()
}

impl SweepSpec {
    pub fn new(kind: SweepKind, seed: u64) -> Self {
        Self {
            kind,
            grid: match kind {
                SweepKind::Noise => default_noise_grid(),
                SweepKind::False | SweepKind::Missing => default_count_grid(),
            },
            trials: 100,
            seed,
            sigma: 0.03,
            receivers: 12,
            room: Room::default(),
            pipeline: PipelineConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid.is_empty() {
            return Err(Error::InvalidConfig("sweep grid is empty".into()));
        }
        if self.trials == 0 {
            return Err(Error::InvalidConfig("trials must be >= 1".into()));
        }
        for &g in &self.grid {
            let ok = match self.kind {
                SweepKind::Noise => g >= 0.0 && g.is_finite(),
                SweepKind::False | SweepKind::Missing => g >= 0.0 && g.fract() == 0.0,
            };
            if !ok {
                return Err(Error::InvalidConfig(format!(
                    "bad grid value {g} for {:?} sweep",
                    self.kind
                )));
            }
        }
        self.pipeline.validate()
    }

    fn sigma_at(&self, g: f64) -> f64 {
        match self.kind {
            SweepKind::Noise => g,
            _ => self.sigma,
        }
    }
}

/// Result of one trial. Error vectors are indexed by true source.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialOutcome {
    pub errors: Vec<f64>,
    pub unrefined_errors: Vec<f64>,
    pub association_rate: f64,
    pub false_to_void_rate: Option<f64>,
    /// Full-pair-set root CRLB at each true source.
    pub root_crlb: Vec<f64>,
    pub estimates_returned: usize,
    /// Set when the pipeline returned an error; metric fields are then empty.
    pub failure: Option<String>,
}

impl TrialOutcome {
    pub fn mean_error(&self) -> f64 {
        mean(&self.errors)
    }

    pub fn mean_unrefined_error(&self) -> f64 {
        mean(&self.unrefined_errors)
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Runs trial `trial` of grid point `grid_index`.
pub fn run_trial(spec: &SweepSpec, grid_index: usize, trial: usize) -> Result<TrialOutcome> {
    let g = spec.grid[grid_index];
    let sigma = spec.sigma_at(g);
    let mut rng = rng_from(&[spec.seed, grid_index as u64, trial as u64]);
    let scene = generate_scene(spec.receivers, spec.pipeline.sources, spec.room, &mut rng)?;
    let clean = synthesize_measurements(&scene, NoiseSpec { sigma }, &mut rng)?;
    let ms = match spec.kind {
        SweepKind::Noise => clean,
        SweepKind::False => inject_false(&clean, g as usize, &mut rng)?,
        SweepKind::Missing => remove_measurements(&clean, g as usize, &mut rng)?,
    };

    let all_pairs = ReceiverPair::all(spec.receivers);
    let crlb_sigma = if sigma > 0.0 { sigma } else { 1.0 };
    let crlb: Vec<f64> = scene
        .sources
        .iter()
        .map(|s| {
            let unit = root_crlb(s, &all_pairs, &scene.receivers, crlb_sigma)?;
            Ok(if sigma > 0.0 { unit } else { 0.0 })
        })
        .collect::<Result<_>>()?;

    let cfg = PipelineConfig {
        sigma,
        ..spec.pipeline
    };
    match localize(&ms, &scene.receivers, &cfg, &mut rng) {
        Ok(loc) => {
            let metrics = evaluate(&loc.estimates, &loc.assignment, &scene, &ms)?;
            let (_, unrefined_errors) = match_estimates(&loc.unrefined, &scene.sources)?;
            Ok(TrialOutcome {
                errors: metrics.errors,
                unrefined_errors,
                association_rate: metrics.association_rate,
                false_to_void_rate: metrics.false_to_void_rate,
                root_crlb: crlb,
                estimates_returned: loc.estimates.len(),
                failure: None,
            })
        }
        Err(e @ (Error::LocalizationFailed(_) | Error::TooFewCandidates { .. })) => {
            Ok(TrialOutcome {
                errors: Vec::new(),
                unrefined_errors: Vec::new(),
                association_rate: f64::NAN,
                false_to_void_rate: None,
                root_crlb: crlb,
                estimates_returned: 0,
                failure: Some(e.to_string()),
            })
        }
        Err(e) => Err(e),
    }
}

/// Worker pool honoring [`THREADS_ENV`].
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v.trim().parse().map_err(|_| {
            Error::InvalidConfig(format!(
                "{THREADS_ENV} must be a positive integer, got {v:?}"
            ))
        })?;
        if n == 0 {
            return Err(Error::InvalidConfig(format!(
                "{THREADS_ENV} must be positive"
            )));
        }
        builder = builder.num_threads(n);
    }
    builder
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))
}

/// All trials of every grid point, in grid order then trial order.
pub fn run_sweep(spec: &SweepSpec) -> Result<Vec<Vec<TrialOutcome>>> {
    spec.validate()?;
    let pool = thread_pool()?;
    pool.install(|| {
        (0..spec.grid.len())
            .map(|gi| {
                (0..spec.trials)
                    .into_par_iter()
                    .map(|t| run_trial(spec, gi, t))
                    .collect()
            })
            .collect()
    })
}

/// One CSV row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub grid_value: f64,
    pub mean_error: f64,
    pub mean_error_refined: f64,
    pub association_rate: f64,
    pub false_to_void_rate: f64,
    pub mean_root_crlb: f64,
    pub trials: usize,
    pub failures: usize,
}

/// Column meanings, shown in `--help`.
pub const CSV_SCHEMA: &str = "\
CSV columns (header row always written, one row per grid point):
  grid_value          sigma in meters (noise sweep) or measurement count N
  mean_error          mean distance of the unrefined estimates to the truth, m
  mean_error_refined  mean distance of the refined estimates to the truth, m
  association_rate    mean fraction of correctly associated measurements
  false_to_void_rate  mean fraction of false measurements sent to the void;
                      NaN when no false measurements are present
  mean_root_crlb      mean full-pair-set root CRLB at the true sources, m
  trials              trials run at this grid point
  failures            trials where localization returned no estimates
Means are over successful trials and, for errors, over sources.";

/// Aggregates the trials of one grid point.
pub fn aggregate(grid_value: f64, trials: &[TrialOutcome]) -> SweepRow {
    let ok: Vec<&TrialOutcome> = trials.iter().filter(|t| t.failure.is_none()).collect();
    let flat = |f: fn(&TrialOutcome) -> &[f64]| -> f64 {
        mean(
            &ok.iter()
                .flat_map(|t| f(t).iter().copied())
                .collect::<Vec<_>>(),
        )
    };
    let f2v: Vec<f64> = ok.iter().filter_map(|t| t.false_to_void_rate).collect();
    let crlb: Vec<f64> = trials
        .iter()
        .flat_map(|t| t.root_crlb.iter().copied())
        .collect();
    SweepRow {
        grid_value,
        mean_error: flat(|t| &t.unrefined_errors),
        mean_error_refined: flat(|t| &t.errors),
        association_rate: mean(&ok.iter().map(|t| t.association_rate).collect::<Vec<_>>()),
        false_to_void_rate: mean(&f2v),
        mean_root_crlb: mean(&crlb),
        trials: trials.len(),
        failures: trials.len() - ok.len(),
    }
}

pub fn rows(spec: &SweepSpec, outcomes: &[Vec<TrialOutcome>]) -> Vec<SweepRow> {
    spec.grid
        .iter()
        .zip(outcomes)
        .map(|(&g, t)| aggregate(g, t))
        .collect()
}

pub fn write_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        w.write_record([
            "grid_value",
            "mean_error",
            "mean_error_refined",
            "association_rate",
            "false_to_void_rate",
            "mean_root_crlb",
            "trials",
            "failures",
        ])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
