//! Candidate source positions from minimal TDOA multilateration.
//!
//! A pair index set holds `P` receiver pairs (three by default) that together
//! touch at least four distinct receivers. Every combination of one
//! measurement per pair is pushed through [`solve_minimal`], and the union of
//! all real roots over all index sets, with near-duplicates removed, forms the
//! candidate set.
//!
//! The minimal solver is a multi-start damped Gauss–Newton (Levenberg–Marquardt)
//! iteration on the signed range-difference equations
//! `‖x − r_k‖ − ‖x − r_l‖ = d`, started from a fixed lattice over the receiver
//! bounding box. Converged roots are clustered and kept when every equation
//! holds to within `accept_tol`.

use itertools::Itertools;
use nalgebra::{Matrix3, Vector3};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{pair_count, Observation, Point3, ReceiverPair};

/// Number of pairs per index set used throughout.
pub const DEFAULT_SET_SIZE: usize = 3;

/// Candidates closer than this are considered duplicates.
pub const DEDUP_RADIUS: f64 = 0.01;

const MAX_DRAWS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairIndexSet {
    pairs: Vec<ReceiverPair>,
}

impl PairIndexSet {
    pub fn new(pairs: Vec<ReceiverPair>) -> Result<Self> {
        for (a, p) in pairs.iter().enumerate() {
            if pairs[..a].contains(p) {
                return Err(Error::InvalidPairSet(format!("pair {p} repeated")));
            }
        }
        let unique = unique_receivers(&pairs);
        if unique < 4 {
            return Err(Error::InvalidPairSet(format!(
                "pairs touch only {unique} distinct receivers, need at least 4"
            )));
        }
        Ok(Self { pairs })
    }

    pub fn pairs(&self) -> &[ReceiverPair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

fn unique_receivers(pairs: &[ReceiverPair]) -> usize {
    let mut idx: Vec<usize> = pairs.iter().flat_map(|p| [p.k, p.l]).collect();
    idx.sort_unstable();
    idx.dedup();
    idx.len()
}

/// Draws `sets` index sets of `size` pairs each, with no pair shared between
/// sets. A draw shuffles all pairs and cuts the permutation into consecutive
/// chunks; draws with an invalid chunk are rejected.
pub fn choose_pair_sets<R: Rng + ?Sized>(
    receivers: usize,
    sets: usize,
    size: usize,
    rng: &mut R,
) -> Result<Vec<PairIndexSet>> {
    let unsatisfiable = Error::PairSetsUnsatisfiable {
        receivers,
        sets,
        size,
    };
    if sets == 0 || size == 0 || pair_count(receivers) < sets * size {
        return Err(unsatisfiable);
    }
    let mut all = ReceiverPair::all(receivers);
    for _ in 0..MAX_DRAWS {
        all.shuffle(rng);
        let drawn: Result<Vec<_>> = all
            .chunks(size)
            .take(sets)
            .map(|c| PairIndexSet::new(c.to_vec()))
            .collect();
        if let Ok(drawn) = drawn {
            return Ok(drawn);
        }
    }
    Err(unsatisfiable)
}

/// `max(1e-6 m, 3σ√3)`: the largest per-equation mismatch a root may carry.
pub fn accept_tolerance(sigma: f64) -> f64 {
    (3.0 * sigma * 3f64.sqrt()).max(1e-6)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MinimalSolverConfig {
    pub accept_tol: f64,
    /// Starting points per axis.
    pub lattice: [usize; 3],
    /// Relative growth of the receiver bounding box before laying the lattice.
    pub inflate: f64,
    /// Roots closer than this are merged.
    pub cluster_radius: f64,
    pub max_iter: usize,
}

impl Default for MinimalSolverConfig {
    fn default() -> Self {
        Self {
            accept_tol: 1e-6,
            lattice: [5, 5, 3],
            inflate: 0.5,
            cluster_radius: 1e-4,
            max_iter: 60,
        }
    }
}

impl MinimalSolverConfig {
    pub fn for_sigma(sigma: f64) -> Self {
        Self {
            accept_tol: accept_tolerance(sigma),
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Root {
    pub position: Point3,
    /// Largest absolute equation mismatch, in meters.
    pub residual: f64,
}

struct Equations<'a> {
    rk: Vec<&'a Point3>,
    rl: Vec<&'a Point3>,
    d: &'a [f64],
}

impl Equations<'_> {
    fn residuals(&self, x: &Point3) -> Vec<f64> {
        (0..self.d.len())
            .map(|i| (x - self.rk[i]).norm() - (x - self.rl[i]).norm() - self.d[i])
            .collect()
    }

    fn normal_equations(&self, x: &Point3, f: &[f64]) -> (Matrix3<f64>, Vector3<f64>) {
        let mut a = Matrix3::zeros();
        let mut g = Vector3::zeros();
        for i in 0..self.d.len() {
            let grad = unit(x - self.rk[i]) - unit(x - self.rl[i]);
            a += grad * grad.transpose();
            g += grad * f[i];
        }
        (a, g)
    }
}

fn unit(v: Vector3<f64>) -> Vector3<f64> {
    let n = v.norm();
    if n > 1e-15 {
        v / n
    } else {
        Vector3::zeros()
    }
}

fn sum_sq(f: &[f64]) -> f64 {
    f.iter().map(|r| r * r).sum()
}

fn max_abs(f: &[f64]) -> f64 {
    f.iter().fold(0.0, |m, r| m.max(r.abs()))
}

/// Levenberg–Marquardt descent from `x0`. Returns the final point, or `None`
/// if the iterate ran away.
fn descend(
    eqs: &Equations,
    x0: Point3,
    center: &Point3,
    escape: f64,
    max_iter: usize,
) -> Option<Point3> {
    let mut x = x0;
    let mut f = eqs.residuals(&x);
    let mut cost = sum_sq(&f);
    let mut damping = 1e-3;
    for _ in 0..max_iter {
        if max_abs(&f) < 1e-14 {
            break;
        }
        let (a, g) = eqs.normal_equations(&x, &f);
        let mut improved = false;
        let mut step_norm = 0.0;
        while damping < 1e10 {
            let mut lhs = a;
            for d in 0..3 {
                lhs[(d, d)] += damping * (a[(d, d)] + 1e-9);
            }
            let Some(step) = lhs.cholesky().map(|c| c.solve(&(-g))) else {
                damping *= 4.0;
                continue;
            };
            let trial = x + step;
            let ft = eqs.residuals(&trial);
            let ct = sum_sq(&ft);
            if ct < cost {
                x = trial;
                f = ft;
                cost = ct;
                step_norm = step.norm();
                damping = (damping / 3.0).max(1e-12);
                improved = true;
                break;
            }
            damping *= 4.0;
        }
        if !improved || step_norm < 1e-13 * (1.0 + x.norm()) {
            break;
        }
        if (x - center).norm() > escape {
            return None;
        }
    }
    Some(x)
}

/// Lattice of starting points over the receivers' bounding box.
fn start_lattice(receivers: &[Point3], cfg: &MinimalSolverConfig) -> (Vec<Point3>, Point3, f64) {
    let mut lo = receivers[0];
    let mut hi = receivers[0];
    for r in receivers {
        lo = lo.inf(r);
        hi = hi.sup(r);
    }
    let center = (lo + hi) / 2.0;
    let extent = hi - lo;
    let largest = extent.max().max(1e-3);
    // Flat receiver layouts would otherwise pin every start to the plane.
    let extent = extent.map(|e| e.max(0.25 * largest)) * (1.0 + cfg.inflate);
    let mut pts = Vec::with_capacity(cfg.lattice.iter().product());
    for ix in 0..cfg.lattice[0] {
        for iy in 0..cfg.lattice[1] {
            for iz in 0..cfg.lattice[2] {
                let frac = Vector3::new(
                    (ix as f64 + 0.5) / cfg.lattice[0] as f64 - 0.5,
                    (iy as f64 + 0.5) / cfg.lattice[1] as f64 - 0.5,
                    (iz as f64 + 0.5) / cfg.lattice[2] as f64 - 0.5,
                );
                pts.push(center + extent.component_mul(&frac));
            }
        }
    }
    (pts, center, 100.0 * extent.norm())
}

/// All real roots of the range-difference equations for `pairs` and `tdoas`
/// that satisfy every equation within `cfg.accept_tol`, in discovery order.
pub fn solve_minimal(
    pairs: &PairIndexSet,
    tdoas: &[f64],
    receivers: &[Point3],
    cfg: &MinimalSolverConfig,
) -> Vec<Root> {
    assert_eq!(pairs.len(), tdoas.len(), "one TDOA per pair");
    let eqs = Equations {
        rk: pairs.pairs().iter().map(|p| &receivers[p.k]).collect(),
        rl: pairs.pairs().iter().map(|p| &receivers[p.l]).collect(),
        d: tdoas,
    };
    // No real point on a hyperboloid branch beyond the baseline.
    for i in 0..tdoas.len() {
        if tdoas[i].abs() > (eqs.rk[i] - eqs.rl[i]).norm() + cfg.accept_tol {
            return Vec::new();
        }
    }

    let (starts, center, escape) = start_lattice(receivers, cfg);
    let mut roots: Vec<Root> = Vec::new();
    for x0 in starts {
        let Some(x) = descend(&eqs, x0, &center, escape, cfg.max_iter) else {
            continue;
        };
        let residual = max_abs(&eqs.residuals(&x));
        if residual > cfg.accept_tol {
            continue;
        }
        match roots
            .iter_mut()
            .find(|r| (r.position - x).norm() <= cfg.cluster_radius)
        {
            Some(r) if residual < r.residual => {
                r.position = x;
                r.residual = residual;
            }
            Some(_) => {}
            None => roots.push(Root {
                position: x,
                residual,
            }),
        }
    }
    roots
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub position: Point3,
    /// Index of the pair index set that produced the candidate.
    pub set_id: usize,
    /// Observation indices, one per pair of the index set.
    pub tuple: Vec<usize>,
    pub residual: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CandidateSet {
    pub candidates: Vec<Candidate>,
    /// Index sets with at least one pair lacking observations.
    pub skipped_sets: Vec<usize>,
    /// Candidate count before duplicate removal.
    pub raw_count: usize,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn positions(&self) -> Vec<Point3> {
        self.candidates.iter().map(|c| c.position).collect()
    }

    pub fn to_records(&self) -> Vec<CandidateRecord> {
        self.candidates
            .iter()
            .map(|c| CandidateRecord {
                x: c.position.x,
                y: c.position.y,
                z: c.position.z,
                set_id: c.set_id,
                tuple: c.tuple.clone(),
                residual: c.residual,
            })
            .collect()
    }
}

/// JSON form of a single candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub set_id: usize,
    pub tuple: Vec<usize>,
    pub residual: f64,
}

/// Keeps the first of every group of candidates within `radius` of an
/// already kept one.
pub fn dedup_candidates(candidates: Vec<Candidate>, radius: f64) -> Vec<Candidate> {
    let mut kept: Vec<Candidate> = Vec::with_capacity(candidates.len());
    for c in candidates {
        if kept
            .iter()
            .all(|k| (k.position - c.position).norm() > radius)
        {
            kept.push(c);
        }
    }
    kept
}

/// Solves every measurement combination of every index set and merges the
/// roots in (set, tuple, root) order.
pub fn build_candidates(
    observations: &[Observation],
    pair_sets: &[PairIndexSet],
    receivers: &[Point3],
    cfg: &MinimalSolverConfig,
) -> CandidateSet {
    let mut skipped_sets = Vec::new();
    let mut jobs: Vec<(usize, Vec<usize>)> = Vec::new();
    for (set_id, set) in pair_sets.iter().enumerate() {
        let psi: Vec<Vec<usize>> = set
            .pairs()
            .iter()
            .map(|p| {
                observations
                    .iter()
                    .enumerate()
                    .filter(|(_, o)| o.pair == *p)
                    .map(|(i, _)| i)
                    .collect()
            })
            .collect();
        if psi.iter().any(Vec::is_empty) {
            skipped_sets.push(set_id);
            continue;
        }
        jobs.extend(
            psi.iter()
                .map(|l| l.iter().copied())
                .multi_cartesian_product()
                .map(|t| (set_id, t)),
        );
    }

    let found: Vec<Vec<Candidate>> = jobs
        .par_iter()
        .map(|(set_id, tuple)| {
            let tdoas: Vec<f64> = tuple.iter().map(|&i| observations[i].value).collect();
            solve_minimal(&pair_sets[*set_id], &tdoas, receivers, cfg)
                .into_iter()
                .map(|r| Candidate {
                    position: r.position,
                    set_id: *set_id,
                    tuple: tuple.clone(),
                    residual: r.residual,
                })
                .collect()
        })
        .collect();
    let all: Vec<Candidate> = found.into_iter().flatten().collect();
    let raw_count = all.len();
    CandidateSet {
        candidates: dedup_candidates(all, DEDUP_RADIUS),
        skipped_sets,
        raw_count,
    }
}
