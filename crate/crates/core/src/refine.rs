//! Re-association against the selected sources and per-source least-squares
//! refinement.

use nalgebra::{Matrix3, Vector3};
use serde::Serialize;

use crate::error::Result;
use crate::scene::{Observation, Point3};
use crate::transport::{
    build_cost, extract_selection, sinkhorn_solve, Assignment, AssociationResult, SolveDiagnostics,
    SolverConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RefineConfig {
    pub max_evals: usize,
    /// Step-length tolerance, meters.
    pub xtol: f64,
    /// Relative objective-decrease tolerance.
    pub ftol: f64,
    /// Steps landing farther than this from the start point (meters) are
    /// rejected. Far from the receivers the objective can keep decreasing
    /// along a hyperboloid asymptote.
    pub max_shift: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            max_evals: 2000,
            xtol: 1e-9,
            ftol: 1e-12,
            max_shift: 10.0,
        }
    }
}

/// Re-solves the transport problem with the columns restricted to `selected`
/// (void cost recomputed on the restricted costs) and assigns every row to one
/// of them or to the void. Slot `s` of the result is `selected[s]`.
pub fn reassociate(
    observations: &[Observation],
    selected: &[Point3],
    receivers: &[Point3],
    cfg: &SolverConfig,
) -> Result<(AssociationResult, SolveDiagnostics)> {
    let cm = build_cost(selected, observations, receivers)?;
    let sol = sinkhorn_solve(&cm, cfg)?;
    let raw = extract_selection(&sol.plan, selected.len())?;
    // Put slots back in the caller's order.
    let mut selected_by_col = raw.selected.clone();
    selected_by_col.sort_by_key(|s| s.candidate);
    let assign = raw
        .assign
        .iter()
        .map(|a| match *a {
            Assignment::Source(slot) => Assignment::Source(raw.selected[slot].candidate),
            Assignment::Void => Assignment::Void,
        })
        .collect();
    Ok((
        AssociationResult {
            selected: selected_by_col,
            assign,
        },
        sol.diagnostics,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RefineStatus {
    Converged,
    /// Evaluation budget ran out; the best point seen is returned.
    MaxEvals,
    /// Fewer than three measurements; the start point is returned.
    TooFewMeasurements,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineOutcome {
    pub position: Point3,
    pub objective: f64,
    pub initial_objective: f64,
    pub evaluations: usize,
    pub status: RefineStatus,
}

/// Sum of squared ground costs of `x` against `obs`.
pub fn objective(x: &Point3, obs: &[Observation], receivers: &[Point3]) -> f64 {
    obs.iter()
        .map(|o| {
            let r = (x - receivers[o.pair.k]).norm() - (x - receivers[o.pair.l]).norm() - o.value;
            r * r
        })
        .sum()
}

fn unit(v: Vector3<f64>) -> Vector3<f64> {
    let n = v.norm();
    if n > 1e-15 {
        v / n
    } else {
        Vector3::zeros()
    }
}

/// Local minimizer of [`objective`] from `x0` by Levenberg–Marquardt, kept
/// within `rc.max_shift` of `x0`. Only steps that lower the objective are
/// taken, so the result never scores worse than `x0`.
pub fn refine_position(
    x0: &Point3,
    assigned: &[Observation],
    receivers: &[Point3],
    rc: &RefineConfig,
) -> RefineOutcome {
    let initial = objective(x0, assigned, receivers);
    if assigned.len() < 3 {
        return RefineOutcome {
            position: *x0,
            objective: initial,
            initial_objective: initial,
            evaluations: 1,
            status: RefineStatus::TooFewMeasurements,
        };
    }

    let mut x = *x0;
    let mut f = initial;
    let mut evals = 1;
    let mut damping = 1e-3;
    let mut status = RefineStatus::MaxEvals;
    'outer: while evals < rc.max_evals {
        if f == 0.0 {
            status = RefineStatus::Converged;
            break;
        }
        let mut a = Matrix3::zeros();
        let mut g = Vector3::zeros();
        for o in assigned {
            let dk = x - receivers[o.pair.k];
            let dl = x - receivers[o.pair.l];
            let r = dk.norm() - dl.norm() - o.value;
            let grad = unit(dk) - unit(dl);
            a += grad * grad.transpose();
            g += grad * r;
        }
        loop {
            if evals >= rc.max_evals {
                break 'outer;
            }
            let mut lhs = a;
            for d in 0..3 {
                lhs[(d, d)] += damping * (a[(d, d)] + 1e-12);
            }
            let step = match lhs.cholesky() {
                Some(c) => c.solve(&(-g)),
                None => {
                    damping *= 10.0;
                    if damping > 1e16 {
                        status = RefineStatus::Converged;
                        break 'outer;
                    }
                    continue;
                }
            };
            let trial = x + step;
            let inside = (trial - x0).norm() <= rc.max_shift;
            let ft = if inside {
                objective(&trial, assigned, receivers)
            } else {
                f64::INFINITY
            };
            evals += 1;
            if ft < f {
                let decrease = f - ft;
                x = trial;
                f = ft;
                damping = (damping / 3.0).max(1e-15);
                if step.norm() <= rc.xtol || decrease <= rc.ftol * f {
                    status = RefineStatus::Converged;
                    break 'outer;
                }
                break;
            }
            if step.norm() <= rc.xtol {
                status = RefineStatus::Converged;
                break 'outer;
            }
            damping *= 4.0;
        }
    }
    RefineOutcome {
        position: x,
        objective: f,
        initial_objective: initial,
        evaluations: evals,
        status,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, synthesize_measurements, NoiseSpec, Room, Truth};
    use crate::seed::rng_from;

    fn noiseless(seed: u64) -> (crate::scene::Scene, Vec<Observation>) {
        let mut rng = rng_from(&[40, seed]);
        let scene = generate_scene(12, 1, Room::default(), &mut rng).unwrap();
        let ms = synthesize_measurements(&scene, NoiseSpec { sigma: 0.0 }, &mut rng).unwrap();
        (scene, ms.observations())
    }

    #[test]
    fn stays_at_exact_source() {
        let (scene, obs) = noiseless(1);
        let out = refine_position(
            &scene.sources[0],
            &obs,
            &scene.receivers,
            &RefineConfig::default(),
        );
        assert!((out.position - scene.sources[0]).norm() < 1e-12);
        assert!(out.objective <= out.initial_objective);
    }

    #[test]
    fn recovers_perturbed_source() {
        for seed in 0..10 {
            let (scene, obs) = noiseless(seed);
            let x0 = scene.sources[0] + Vector3::new(0.06, -0.05, 0.06);
            let out = refine_position(&x0, &obs, &scene.receivers, &RefineConfig::default());
            assert!(
                (out.position - scene.sources[0]).norm() < 1e-6,
                "seed {seed}: {out:?}"
            );
            assert_eq!(out.status, RefineStatus::Converged);
        }
    }

    #[test]
    fn shift_bound_holds() {
        let (scene, obs) = noiseless(3);
        let x0 = scene.sources[0] + Vector3::new(0.5, 0.0, 0.0);
        let rc = RefineConfig {
            max_shift: 0.05,
            ..RefineConfig::default()
        };
        let out = refine_position(&x0, &obs, &scene.receivers, &rc);
        assert!((out.position - x0).norm() <= 0.05 + 1e-12);
        assert!(out.objective < out.initial_objective);
    }

    #[test]
    fn too_few_measurements() {
        let (scene, obs) = noiseless(2);
        let x0 = Point3::new(1.0, 2.0, 1.0);
        let out = refine_position(&x0, &obs[..2], &scene.receivers, &RefineConfig::default());
        assert_eq!(out.position, x0);
        assert_eq!(out.status, RefineStatus::TooFewMeasurements);
    }

    #[test]
    fn reassociate_exact_sources() {
        let mut rng = rng_from(&[41]);
        let scene = generate_scene(12, 3, Room::default(), &mut rng).unwrap();
        let ms = synthesize_measurements(&scene, NoiseSpec { sigma: 0.0 }, &mut rng).unwrap();
        let cfg = SolverConfig::for_receivers(12);
        let (assoc, diag) =
            reassociate(&ms.observations(), &scene.sources, &scene.receivers, &cfg).unwrap();
        assert!(diag.converged, "{diag:?}");
        for (m, a) in ms.measurements.iter().zip(&assoc.assign) {
            let Some(Truth::Source(j)) = m.truth else {
                panic!()
            };
            assert_eq!(*a, Assignment::Source(j));
        }
    }

    #[test]
    fn reassociate_single_candidate_splits_rows() {
        let mut rng = rng_from(&[42]);
        let scene = generate_scene(12, 2, Room::default(), &mut rng).unwrap();
        let ms = synthesize_measurements(&scene, NoiseSpec { sigma: 0.0 }, &mut rng).unwrap();
        let cfg = SolverConfig::for_receivers(12);
        let (assoc, _) = reassociate(
            &ms.observations(),
            &scene.sources[..1],
            &scene.receivers,
            &cfg,
        )
        .unwrap();
        for (m, a) in ms.measurements.iter().zip(&assoc.assign) {
            if m.truth == Some(Truth::Source(0)) {
                assert_eq!(*a, Assignment::Source(0));
            }
        }
        assert!(assoc.assign.iter().any(|a| *a == Assignment::Void));
    }
}
