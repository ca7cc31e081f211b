//! End-to-end localization: candidate generation, transport-based
//! association, re-association and refinement, plus evaluation against ground
//! truth.

use itertools::Itertools;
use rand::Rng;
use serde::Serialize;

use crate::crlb::root_crlb;
use crate::error::{Error, Result};
use crate::multilateration::{
    build_candidates, choose_pair_sets, CandidateSet, MinimalSolverConfig, PairIndexSet,
    DEFAULT_SET_SIZE,
};
use crate::refine::{reassociate, refine_position, RefineConfig, RefineStatus};
use crate::scene::{pair_count, MeasurementSet, Observation, Point3, Scene, Truth};
use crate::transport::{
    build_cost, extract_selection_by, sinkhorn_solve, Assignment, ColumnScore, SolveDiagnostics,
    SolverConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PipelineConfig {
    /// Number of sources S.
    pub sources: usize,
    /// Number of pair index sets K.
    pub sets: usize,
    /// Pairs per index set P.
    pub set_size: usize,
    /// Nominal TDOA noise level in meters, used for root acceptance and the
    /// retry bound.
    pub sigma: f64,
    pub solver: SolverConfig,
    pub refine: RefineConfig,
    /// Index sets whose candidates all have a root CRLB above this (meters)
    /// are considered unidentifiable.
    pub crlb_retry_threshold: f64,
    pub max_retries: usize,
    /// Re-association and refinement rounds, each starting from the previous
    /// round's positions.
    pub refine_passes: usize,
    /// Ranking used to pick the S source columns.
    pub column_score: ColumnScore,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            sources: 3,
            sets: 3,
            set_size: DEFAULT_SET_SIZE,
            sigma: 0.03,
            solver: SolverConfig::default(),
            refine: RefineConfig::default(),
            crlb_retry_threshold: 20.0,
            max_retries: 5,
            refine_passes: 2,
            column_score: ColumnScore::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sources == 0 || self.sets == 0 || self.set_size == 0 || self.refine_passes == 0 {
            return Err(Error::InvalidConfig(
                "sources, sets, set_size and refine_passes must be positive".into(),
            ));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "sigma must be >= 0, got {}",
                self.sigma
            )));
        }
        if !(self.crlb_retry_threshold > 0.0) {
            return Err(Error::InvalidConfig(
                "crlb_retry_threshold must be > 0".into(),
            ));
        }
        self.solver.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LocalizeDiagnostics {
    /// Index-set redraws beyond the first draw.
    pub retries: usize,
    /// Every draw failed the identifiability check; the last usable one was kept.
    pub retries_exhausted: bool,
    pub pair_sets: Vec<PairIndexSet>,
    pub skipped_sets: Vec<usize>,
    pub raw_candidates: usize,
    pub candidates: usize,
    /// Candidate indices chosen by the full transport solve.
    pub selected_candidates: Vec<usize>,
    pub selection_solve: SolveSummary,
    pub reassociation_solve: SolveSummary,
    pub refine_status: Vec<RefineStatus>,
}

/// Trace-free digest of a transport solve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SolveSummary {
    pub iterations: usize,
    pub converged: bool,
    pub row_residual: f64,
    pub primal: f64,
    pub dual: f64,
}

impl From<&SolveDiagnostics> for SolveSummary {
    fn from(d: &SolveDiagnostics) -> Self {
        Self {
            iterations: d.iterations,
            converged: d.converged,
            row_residual: d.row_residual,
            primal: d.primal,
            dual: d.dual,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Localization {
    /// Refined source estimates.
    pub estimates: Vec<Point3>,
    /// Selected candidate positions before refinement.
    pub unrefined: Vec<Point3>,
    /// Per input measurement (in input order): slot in `estimates`, or void.
    pub assignment: Vec<Assignment>,
    pub diagnostics: LocalizeDiagnostics,
    /// Full diagnostics, traces included, of the selection solve and the
    /// re-association solve.
    pub selection_solve: SolveDiagnostics,
    pub reassociation_solve: SolveDiagnostics,
}

/// Canonical processing order: by pair, then value.
fn canonical_order(ms: &MeasurementSet) -> Vec<usize> {
    let mut order: Vec<usize> = (0..ms.len()).collect();
    order.sort_by(|&a, &b| {
        let (ma, mb) = (&ms.measurements[a], &ms.measurements[b]);
        ma.pair.cmp(&mb.pair).then(ma.value.total_cmp(&mb.value))
    });
    order
}

/// Root CRLB of an index set at `x`, scaled by `sigma`. Zero noise keeps
/// singular geometries at +∞.
fn set_crlb(x: &Point3, set: &PairIndexSet, receivers: &[Point3], sigma: f64) -> f64 {
    match root_crlb(x, set.pairs(), receivers, 1.0) {
        Ok(unit) if unit.is_finite() => unit * sigma,
        _ => f64::INFINITY,
    }
}

/// True when some index set produced a candidate whose minimal-set root CRLB
/// is within `threshold`.
fn identifiable(
    cands: &CandidateSet,
    sets: &[PairIndexSet],
    receivers: &[Point3],
    sigma: f64,
    threshold: f64,
) -> bool {
    cands
        .candidates
        .iter()
        .any(|c| set_crlb(&c.position, &sets[c.set_id], receivers, sigma) <= threshold)
}

/// Localizes `cfg.sources` sources from unlabeled measurements. Truth tags in
/// `ms` are ignored.
pub fn localize<R: Rng + ?Sized>(
    ms: &MeasurementSet,
    receivers: &[Point3],
    cfg: &PipelineConfig,
    rng: &mut R,
) -> Result<Localization> {
    cfg.validate()?;
    if receivers.len() < 4 {
        return Err(Error::InvalidScene(format!(
            "need at least 4 receivers, got {}",
            receivers.len()
        )));
    }
    if ms.is_empty() {
        return Err(Error::Empty("measurement set"));
    }
    ms.validate(receivers.len())?;

    let order = canonical_order(ms);
    let all_obs = ms.observations();
    let obs: Vec<Observation> = order.iter().map(|&i| all_obs[i]).collect();
    let solver = SolverConfig {
        r_tilde: pair_count(receivers.len()) as f64,
        ..cfg.solver
    };
    let minimal = MinimalSolverConfig::for_sigma(cfg.sigma);

    let mut chosen: Option<(Vec<PairIndexSet>, CandidateSet)> = None;
    let mut retries = 0;
    let mut exhausted = true;
    for attempt in 0..=cfg.max_retries {
        retries = attempt;
        let sets = choose_pair_sets(receivers.len(), cfg.sets, cfg.set_size, rng)?;
        let cands = build_candidates(&obs, &sets, receivers, &minimal);
        if cands.is_empty() {
            continue;
        }
        let ok = identifiable(
            &cands,
            &sets,
            receivers,
            cfg.sigma,
            cfg.crlb_retry_threshold,
        );
        chosen = Some((sets, cands));
        if ok {
            exhausted = false;
            break;
        }
    }
    let Some((pair_sets, cands)) = chosen else {
        return Err(Error::LocalizationFailed(format!(
            "no candidates after {} index-set draws",
            cfg.max_retries + 1
        )));
    };
    if cands.len() < cfg.sources {
        return Err(Error::LocalizationFailed(format!(
            "only {} candidates for {} sources",
            cands.len(),
            cfg.sources
        )));
    }

    let positions = cands.positions();
    let cm = build_cost(&positions, &obs, receivers)?;
    let sol = sinkhorn_solve(&cm, &solver)?;
    let selection = extract_selection_by(&sol.plan, cfg.sources, cfg.column_score)?;
    let unrefined: Vec<Point3> = selection
        .selected
        .iter()
        .map(|s| positions[s.candidate])
        .collect();

    // Each pass re-associates against the current positions and refines from
    // them. A later pass can undo a row claimed by a candidate that sits on
    // that row's hyperboloid only by coincidence.
    let mut estimates = unrefined.clone();
    let mut assoc = None;
    let mut refine_status = Vec::new();
    for _ in 0..cfg.refine_passes {
        let (a, d) = reassociate(&obs, &estimates, receivers, &solver)?;
        refine_status.clear();
        for (slot, x) in estimates.iter_mut().enumerate() {
            let assigned: Vec<Observation> = obs
                .iter()
                .zip(&a.assign)
                .filter(|(_, a)| **a == Assignment::Source(slot))
                .map(|(o, _)| *o)
                .collect();
            let out = refine_position(x, &assigned, receivers, &cfg.refine);
            *x = out.position;
            refine_status.push(out.status);
        }
        assoc = Some((a, d));
    }
    let (assoc, re_diag) = assoc.expect("refine_passes validated >= 1");

    let mut assignment = vec![Assignment::Void; ms.len()];
    for (row, &orig) in order.iter().enumerate() {
        assignment[orig] = assoc.assign[row];
    }

    Ok(Localization {
        estimates,
        unrefined,
        assignment,
        diagnostics: LocalizeDiagnostics {
            retries,
            retries_exhausted: exhausted,
            skipped_sets: cands.skipped_sets.clone(),
            pair_sets,
            raw_candidates: cands.raw_count,
            candidates: cands.len(),
            selected_candidates: selection.selected.iter().map(|s| s.candidate).collect(),
            selection_solve: (&sol.diagnostics).into(),
            reassociation_solve: (&re_diag).into(),
            refine_status,
        },
        selection_solve: sol.diagnostics,
        reassociation_solve: re_diag,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    /// Localization error per true source, meters.
    pub errors: Vec<f64>,
    pub mean_error: f64,
    pub association_rate: f64,
    /// Share of false measurements sent to the void; `None` without false
    /// measurements.
    pub false_to_void_rate: Option<f64>,
    /// `matching[s]` is the true source matched to estimate `s`.
    pub matching: Vec<usize>,
}

/// Matches estimates to sources by minimum total distance over all
/// permutations. Returns `(matching, per-source errors)`.
pub fn match_estimates(estimates: &[Point3], sources: &[Point3]) -> Result<(Vec<usize>, Vec<f64>)> {
    if estimates.len() != sources.len() {
        return Err(Error::InvalidConfig(format!(
            "{} estimates for {} sources",
            estimates.len(),
            sources.len()
        )));
    }
    let n = sources.len();
    let mut best: Option<(f64, Vec<usize>)> = None;
    for perm in (0..n).permutations(n) {
        let total: f64 = perm
            .iter()
            .enumerate()
            .map(|(s, &j)| (estimates[s] - sources[j]).norm())
            .sum();
        if best.as_ref().is_none_or(|(b, _)| total < *b) {
            best = Some((total, perm));
        }
    }
    let matching = best.map(|(_, p)| p).unwrap_or_default();
    let mut errors = vec![0.0; n];
    for (s, &j) in matching.iter().enumerate() {
        errors[j] = (estimates[s] - sources[j]).norm();
    }
    Ok((matching, errors))
}

/// Scores estimates and assignments against the truth carried by `scene`
/// and the tags in `ms`.
pub fn evaluate(
    estimates: &[Point3],
    assignment: &[Assignment],
    scene: &Scene,
    ms: &MeasurementSet,
) -> Result<Metrics> {
    if let Some(i) = ms.measurements.iter().position(|m| m.truth.is_none()) {
        return Err(Error::MissingTruth(i));
    }
    if assignment.len() != ms.len() {
        return Err(Error::InvalidConfig(
            "assignment length differs from measurement count".into(),
        ));
    }
    let (matching, errors) = match_estimates(estimates, &scene.sources)?;
    let mean_error = errors.iter().sum::<f64>() / errors.len().max(1) as f64;

    let mut correct = 0usize;
    let mut false_total = 0usize;
    let mut false_void = 0usize;
    for (m, a) in ms.measurements.iter().zip(assignment) {
        let ok = match (m.truth.expect("checked above"), a) {
            (Truth::Source(j), Assignment::Source(s)) => matching.get(*s) == Some(&j),
            (Truth::Source(_), Assignment::Void) => false,
            (Truth::False, a) => {
                false_total += 1;
                let void = *a == Assignment::Void;
                false_void += void as usize;
                void
            }
        };
        correct += ok as usize;
    }
    let association_rate = if ms.is_empty() {
        1.0
    } else {
        correct as f64 / ms.len() as f64
    };
    Ok(Metrics {
        errors,
        mean_error,
        association_rate,
        false_to_void_rate: (false_total > 0).then(|| false_void as f64 / false_total as f64),
        matching,
    })
}

/// JSON form of a localization run.
#[derive(Debug, Clone, Serialize)]
pub struct ResultDocument {
    pub estimates: Vec<[f64; 3]>,
    pub assignment: Vec<Assignment>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<Metrics>,
    pub diagnostics: LocalizeDiagnostics,
}

impl ResultDocument {
    pub fn new(loc: &Localization, metrics: Option<Metrics>) -> Self {
        Self {
            estimates: loc.estimates.iter().map(|p| [p.x, p.y, p.z]).collect(),
            assignment: loc.assignment.clone(),
            metrics,
            diagnostics: loc.diagnostics.clone(),
        }
    }
}
