//! Sparse unbalanced optimal transport between TDOA measurements (rows) and
//! candidate source positions (columns).
//!
//! The primal problem is
//!
//! ```text
//! min_{M, m}  <C, M> + <c, m> + ε (D(M) + D(m)) + η Σ_j max_i M_ij
//! s.t.        M 1 + m = 1,   Mᵀ 1 ≤ R̃ 1
//! ```
//!
//! where `m` routes measurements to a void source, `D(x) = x log x − x + 1`
//! and the last term promotes few active columns. The solver works on the
//! concave dual in the potentials `λ` (rows), `μ ≥ 0` (columns) and `Φ`
//! (per-column ℓ1 ball of radius η), maximizing it by exact block-coordinate
//! updates. The primal is recovered as
//!
//! ```text
//! log M_ij = (−C_ij + Φ_ij + λ_i − μ_j) / ε,   log m_i = (λ_i − c_i) / ε.
//! ```
//!
//! All potentials are kept in cost units and every sum of exponentials goes
//! through a shifted log-sum-exp, so ε can be made very small without
//! overflow. The solve anneals ε geometrically from the cost scale down to the
//! target value, warm-starting the potentials at each stage.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{Observation, Point3, ReceiverPair};

/// Percentile of the cost entries used as the void cost.
pub const VOID_PERCENTILE: f64 = 95.0;

/// `(‖x − r_k‖ − ‖x − r_l‖ − τ)²`.
pub fn ground_cost(x: &Point3, tau: f64, pair: ReceiverPair, receivers: &[Point3]) -> f64 {
    let r = (x - receivers[pair.k]).norm() - (x - receivers[pair.l]).norm() - tau;
    r * r
}

/// Percentile `q` (0–100) by linear interpolation between closest ranks,
/// i.e. position `(n − 1) q / 100` of the sorted values.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of empty slice");
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = (sorted.len() - 1) as f64 * q / 100.0;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    /// `|T| × |Ω|` ground costs.
    pub cost: DMatrix<f64>,
    /// Per-row cost of the void source.
    pub void: DVector<f64>,
    /// Receiver pair of each row.
    pub pair_of: Vec<ReceiverPair>,
}

impl CostMatrix {
    pub fn new(cost: DMatrix<f64>, void: DVector<f64>, pair_of: Vec<ReceiverPair>) -> Result<Self> {
        if cost.nrows() == 0 {
            return Err(Error::Empty("measurement set"));
        }
        if cost.ncols() == 0 {
            return Err(Error::Empty("candidate set"));
        }
        if void.len() != cost.nrows() || pair_of.len() != cost.nrows() {
            return Err(Error::InvalidConfig(
                "cost matrix dimensions disagree".into(),
            ));
        }
        let ok = |v: &f64| v.is_finite() && *v >= 0.0;
        if !cost.iter().all(ok) || !void.iter().all(ok) {
            return Err(Error::InvalidConfig(
                "costs must be finite and non-negative".into(),
            ));
        }
        Ok(Self {
            cost,
            void,
            pair_of,
        })
    }

    pub fn rows(&self) -> usize {
        self.cost.nrows()
    }

    pub fn cols(&self) -> usize {
        self.cost.ncols()
    }
}

/// Ground costs between observations and candidates, with a constant void
/// cost equal to the 95th percentile of all entries.
pub fn build_cost(
    candidates: &[Point3],
    observations: &[Observation],
    receivers: &[Point3],
) -> Result<CostMatrix> {
    if observations.is_empty() {
        return Err(Error::Empty("measurement set"));
    }
    if candidates.is_empty() {
        return Err(Error::Empty("candidate set"));
    }
    let cost = DMatrix::from_fn(observations.len(), candidates.len(), |i, j| {
        ground_cost(
            &candidates[j],
            observations[i].value,
            observations[i].pair,
            receivers,
        )
    });
    let level = percentile(cost.as_slice(), VOID_PERCENTILE);
    let void = DVector::from_element(observations.len(), level);
    CostMatrix::new(cost, void, observations.iter().map(|o| o.pair).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SolverConfig {
    /// Entropy weight ε.
    pub epsilon: f64,
    /// Column-sparsity weight η.
    pub eta: f64,
    /// Column capacity R̃, the number of receiver pairs.
    pub r_tilde: f64,
    /// Tolerance on the row marginals `M 1 + m = 1`.
    pub feas_tol: f64,
    pub max_iter: usize,
    /// Anneal ε from the cost scale down to `epsilon`. When off, every
    /// iteration runs at `epsilon`.
    pub anneal: bool,
    pub sweep: Sweep,
    /// Record the dual objective after every final-stage iteration.
    pub trace_objective: bool,
}

/// Block structure of one solver iteration. Both variants are exact block
/// maximizations of the same dual, so they share fixed points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sweep {
    /// λ, then μ, then Φ, each over all indices at once.
    Alternating,
    /// λ, then per column `(λ, μ_j)` and `(λ, Φ_:,j)` with λ re-optimized in
    /// closed form after each column. Far fewer iterations when columns
    /// compete for the same rows.
    #[default]
    Columnwise,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-7,
            eta: 1.0,
            r_tilde: 66.0,
            feas_tol: 1e-8,
            max_iter: 5000,
            anneal: true,
            sweep: Sweep::Columnwise,
            trace_objective: false,
        }
    }
}

impl SolverConfig {
    pub fn for_receivers(receivers: usize) -> Self {
        Self {
            r_tilde: crate::scene::pair_count(receivers) as f64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "epsilon must be > 0, got {}",
                self.epsilon
            )));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "eta must be >= 0, got {}",
                self.eta
            )));
        }
        if !(self.r_tilde > 0.0) {
            return Err(Error::InvalidConfig("r_tilde must be > 0".into()));
        }
        if !(self.feas_tol > 0.0) || self.max_iter == 0 {
            return Err(Error::InvalidConfig(
                "feas_tol and max_iter must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    /// `M`, measurements × candidates.
    pub plan: DMatrix<f64>,
    /// `m`, mass sent to the void source.
    pub void: DVector<f64>,
}

impl TransportPlan {
    /// `‖M 1 + m − 1‖∞`.
    pub fn row_residual(&self) -> f64 {
        (0..self.plan.nrows())
            .map(|i| (self.plan.row(i).sum() + self.void[i] - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Largest excess of a column sum over `r_tilde`.
    pub fn column_excess(&self, r_tilde: f64) -> f64 {
        self.plan
            .column_iter()
            .map(|c| c.sum() - r_tilde)
            .fold(0.0, f64::max)
    }
}

/// Dual potentials in cost units. The kernels of the multiplicative form are
/// `K = exp(−C/ε)`, `k = exp(−c/ε)`, `u = exp(−μ/ε)`, `v = exp(λ/ε)` and
/// `P = exp(Φ/ε)`; they are never formed explicitly.
#[derive(Debug, Clone, PartialEq)]
pub struct DualState {
    pub lambda: DVector<f64>,
    pub mu: DVector<f64>,
    pub phi: DMatrix<f64>,
    /// ε the potentials were last updated at.
    pub epsilon: f64,
}

impl DualState {
    pub fn zeros(rows: usize, cols: usize, epsilon: f64) -> Self {
        Self {
            lambda: DVector::zeros(rows),
            mu: DVector::zeros(cols),
            phi: DMatrix::zeros(rows, cols),
            epsilon,
        }
    }

    /// `ε log M_ij`.
    #[inline]
    fn scaled_log_plan(&self, cm: &CostMatrix, i: usize, j: usize) -> f64 {
        -cm.cost[(i, j)] + self.phi[(i, j)] + self.lambda[i] - self.mu[j]
    }

    /// Primal plan implied by the potentials.
    pub fn plan(&self, cm: &CostMatrix) -> TransportPlan {
        let eps = self.epsilon;
        let plan = DMatrix::from_fn(cm.rows(), cm.cols(), |i, j| {
            (self.scaled_log_plan(cm, i, j) / eps).exp()
        });
        let void = DVector::from_fn(cm.rows(), |i, _| {
            ((self.lambda[i] - cm.void[i]) / eps).exp()
        });
        TransportPlan { plan, void }
    }

    /// Largest per-column ℓ1 norm of Φ.
    pub fn phi_norm(&self) -> f64 {
        self.phi
            .column_iter()
            .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }
}

/// `ε · log Σ exp(v / ε)`, shifted by the maximum. Returns −∞ for an empty or
/// all −∞ input.
fn soft_max(values: impl Iterator<Item = f64> + Clone, eps: f64) -> f64 {
    let top = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if top == f64::NEG_INFINITY {
        return top;
    }
    let sum: f64 = values.map(|v| exp_or_zero((v - top) / eps)).sum();
    top + eps * sum.ln()
}

/// Level `τ` with `Σ_i max(0, v_i − τ) = budget`. Non-finite (−∞) values never
/// enter the active set. Returns `None` when no value is finite.
///
/// Michelot's active-set iteration: τ only grows, and every pass drops the
/// entries at or below it until the set is stable.
fn water_level(values: &[f64], budget: f64) -> Option<f64> {
    let top = values
        .iter()
        .copied()
        .filter(|v| v.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    if top == f64::NEG_INFINITY {
        return None;
    }
    if budget <= 0.0 {
        return Some(top);
    }
    // τ ≥ top − budget, so anything at or below that line stays inactive.
    let floor = top - budget;
    let mut active: Vec<f64> = values
        .iter()
        .copied()
        .filter(|&v| v.is_finite() && v > floor)
        .collect();
    loop {
        let tau = (active.iter().sum::<f64>() - budget) / active.len() as f64;
        let before = active.len();
        active.retain(|&v| v > tau);
        if active.len() == before || active.is_empty() {
            return Some(tau);
        }
    }
}

/// `argmin_x <exp(x), y>  s.t. ‖x‖₁ ≤ p` for `y ≥ 0`, from `log y`.
///
/// The minimizer is `x_i = min(0, log ν − log y_i)` with `ν > 0` chosen so the
/// ℓ1 budget is spent exactly; entries with `y_i = 0` stay at zero.
pub fn gamma_log(log_y: &[f64], p: f64) -> Vec<f64> {
    match water_level(log_y, p) {
        Some(level) if p > 0.0 => log_y
            .iter()
            .map(|&ly| {
                if ly.is_finite() {
                    (level - ly).min(0.0)
                } else {
                    0.0
                }
            })
            .collect(),
        _ => vec![0.0; log_y.len()],
    }
}

/// [`gamma_log`] on a non-negative vector.
pub fn gamma(y: &[f64], p: f64) -> Vec<f64> {
    let log_y: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    gamma_log(&log_y, p)
}

fn update_lambda(dual: &mut DualState, cm: &CostMatrix) {
    let eps = dual.epsilon;
    for i in 0..cm.rows() {
        let terms = (0..cm.cols())
            .map(|j| -cm.cost[(i, j)] + dual.phi[(i, j)] - dual.mu[j])
            .chain(std::iter::once(-cm.void[i]));
        dual.lambda[i] = -soft_max(terms, eps);
    }
}

fn update_mu(dual: &mut DualState, cm: &CostMatrix, r_tilde: f64) {
    let eps = dual.epsilon;
    let log_cap = eps * r_tilde.ln();
    for j in 0..cm.cols() {
        let col = cm.cost.column(j);
        let phi = dual.phi.column(j);
        let lambda = &dual.lambda;
        let terms = (0..cm.rows()).map(|i| -col[i] + phi[i] + lambda[i]);
        dual.mu[j] = (soft_max(terms, eps) - log_cap).max(0.0);
    }
}

/// `exp(z)`, skipping the libm underflow path for very negative `z`.
#[inline]
fn exp_or_zero(z: f64) -> f64 {
    if z < -745.0 {
        0.0
    } else {
        z.exp()
    }
}

/// Logistic function, stable for large |z|.
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = exp_or_zero(z);
        e / (1.0 + e)
    }
}

/// `ε log(exp(a/ε) + exp(b/ε))`.
fn log_add(a: f64, b: f64, eps: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if hi == f64::NEG_INFINITY {
        return hi;
    }
    let e = exp_or_zero((lo - hi) / eps);
    if e == 0.0 {
        hi
    } else {
        hi + eps * e.ln_1p()
    }
}

/// Maximizer over `μ ≥ 0` of the column's restricted dual: `μ = 0` when the
/// column fits (`Σ_i σ((w_i − μ)/ε) ≤ cap` at zero), otherwise the root of
/// `load(μ) = cap`. When the load is flat at `cap` (every contending row
/// fully served) the roots form an interval and the one nearest `current` is
/// kept, so the price does not wander along a flat direction.
fn capacity_price(w: &[f64], eps: f64, cap: f64, current: f64) -> f64 {
    // Load and its slope in units of 1/ε.
    let eval = |mu: f64| {
        w.iter().fold((0.0, 0.0), |(l, d), &wi| {
            let s = sigmoid((wi - mu) / eps);
            (l + s, d + s * (1.0 - s))
        })
    };
    let close = |l: f64| (l - cap).abs() <= 4.0 * f64::EPSILON * cap;
    if eval(0.0).0 <= cap {
        return 0.0;
    }
    let (here, slope) = eval(current);
    if close(here) {
        return current;
    }
    let top = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (mut lo, mut hi) = if here > cap {
        (
            current,
            current.max(top) + eps * ((w.len() as f64).ln() + 40.0),
        )
    } else {
        (0.0, current)
    };
    // Safeguarded Newton: fall back to bisection whenever the step leaves the
    // bracket. Stops when the bracket can no longer shrink in floating point.
    let (mut mu, mut load, mut slope) = (current, here, slope);
    for _ in 0..200 {
        if load > cap {
            lo = mu;
        } else {
            hi = mu;
        }
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            return if here > cap { hi } else { lo };
        }
        let newton = mu + eps * (load - cap) / slope;
        mu = if slope > 0.0 && newton > lo && newton < hi {
            newton
        } else {
            mid
        };
        (load, slope) = eval(mu);
        if close(load) {
            return mu;
        }
    }
    if load > cap {
        hi
    } else {
        mu
    }
}

/// One Gauss–Seidel pass over the columns with λ held at its optimum for the
/// current μ and Φ. For column `j`, `rest_i` is the row's soft-max over every
/// other column and the void, so the dual restricted to `(λ, μ_j)` or
/// `(λ, Φ_:,j)` has a closed-form maximizer: μ_j prices the column down to its
/// capacity, and Φ_:,j is the water-fill on `−C_ij − μ_j − rest_i`. Expects λ
/// to be current on entry and leaves it current.
fn column_sweep(
    dual: &mut DualState,
    cm: &CostMatrix,
    cfg: &SolverConfig,
    columns: &[usize],
    rest: &mut [f64],
    w: &mut [f64],
) {
    let eps = dual.epsilon;
    let rows = cm.rows();
    let cols = cm.cols();
    let cost_all = cm.cost.as_slice();
    let void = cm.void.as_slice();
    for &j in columns {
        let cost = &cost_all[j * rows..(j + 1) * rows];
        let mu_old = dual.mu[j];
        {
            let phi_all = dual.phi.as_slice();
            let phi = &phi_all[j * rows..(j + 1) * rows];
            let lambda = dual.lambda.as_slice();
            let mu = dual.mu.as_slice();
            for i in 0..rows {
                let share = exp_or_zero((-cost[i] + phi[i] - mu_old + lambda[i]) / eps);
                rest[i] = if share == 0.0 {
                    -lambda[i]
                } else if share < 0.5 {
                    -lambda[i] + eps * (-share).ln_1p()
                } else {
                    // Removing a dominant term by subtraction would cancel.
                    let term = |c: usize| -cost_all[c * rows + i] + phi_all[c * rows + i] - mu[c];
                    let mut top = -void[i];
                    for c in (0..cols).filter(|&c| c != j) {
                        top = top.max(term(c));
                    }
                    let mut sum = exp_or_zero((-void[i] - top) / eps);
                    for c in (0..cols).filter(|&c| c != j) {
                        sum += exp_or_zero((term(c) - top) / eps);
                    }
                    top + eps * sum.ln()
                };
                w[i] = -cost[i] + phi[i] - rest[i];
            }
        }
        let mu = capacity_price(w, eps, cfg.r_tilde, mu_old);
        dual.mu[j] = mu;

        for i in 0..rows {
            w[i] = -cost[i] - mu - rest[i];
        }
        let level = water_level(w, cfg.eta).expect("finite scores");
        let phi = &mut dual.phi.as_mut_slice()[j * rows..(j + 1) * rows];
        let lambda = dual.lambda.as_mut_slice();
        for i in 0..rows {
            let p = (level - w[i]).min(0.0);
            phi[i] = p;
            lambda[i] = -log_add(rest[i], -cost[i] + p - mu, eps);
        }
    }
}

/// Columns holding any representable mass. The rest have every entry
/// underflow to zero, so sweeping them cannot change the plan until λ moves
/// enough to revive them.
fn live_columns(dual: &DualState, cm: &CostMatrix) -> Vec<usize> {
    let rows = cm.rows();
    let eps = dual.epsilon;
    let cost = cm.cost.as_slice();
    let phi = dual.phi.as_slice();
    (0..cm.cols())
        .filter(|&j| {
            (0..rows).any(|i| {
                (-cost[j * rows + i] + phi[j * rows + i] - dual.mu[j] + dual.lambda[i]) / eps
                    > -745.0
            })
        })
        .collect()
}

fn update_phi(dual: &mut DualState, cm: &CostMatrix, eta: f64) {
    let mut scores = vec![0.0; cm.rows()];
    for j in 0..cm.cols() {
        for (i, s) in scores.iter_mut().enumerate() {
            *s = -cm.cost[(i, j)] + dual.lambda[i] - dual.mu[j];
        }
        // Same minimizer as Γ(y, η/ε) with log y = scores/ε, rescaled by ε.
        let level = water_level(&scores, eta).expect("finite scores");
        for (i, s) in scores.iter().enumerate() {
            dual.phi[(i, j)] = (level - s).min(0.0);
        }
    }
}

/// Row-marginal residual and column excess of the current potentials,
/// evaluated in the log domain.
fn marginal_errors(dual: &DualState, cm: &CostMatrix, r_tilde: f64) -> (f64, f64) {
    let eps = dual.epsilon;
    let mut row = 0.0f64;
    for i in 0..cm.rows() {
        let terms = (0..cm.cols())
            .map(|j| dual.scaled_log_plan(cm, i, j))
            .chain(std::iter::once(dual.lambda[i] - cm.void[i]));
        let sum = (soft_max(terms, eps) / eps).exp();
        row = row.max((sum - 1.0).abs());
    }
    let mut col = 0.0f64;
    for j in 0..cm.cols() {
        let sum =
            (soft_max((0..cm.rows()).map(|i| dual.scaled_log_plan(cm, i, j)), eps) / eps).exp();
        col = col.max(sum - r_tilde);
    }
    (row, col)
}

fn column_excess(dual: &DualState, cm: &CostMatrix, r_tilde: f64) -> f64 {
    let eps = dual.epsilon;
    (0..cm.cols())
        .map(|j| {
            (soft_max((0..cm.rows()).map(|i| dual.scaled_log_plan(cm, i, j)), eps) / eps).exp()
                - r_tilde
        })
        .fold(0.0, f64::max)
}

/// Value of the relaxed primal objective at `plan`.
pub fn primal_objective(plan: &TransportPlan, cm: &CostMatrix, cfg: &SolverConfig) -> f64 {
    fn entropy(x: f64) -> f64 {
        if x > 0.0 {
            x * x.ln() - x + 1.0
        } else {
            1.0
        }
    }
    let transport: f64 = cm
        .cost
        .iter()
        .zip(plan.plan.iter())
        .map(|(c, m)| c * m)
        .sum();
    let void: f64 = cm
        .void
        .iter()
        .zip(plan.void.iter())
        .map(|(c, m)| c * m)
        .sum();
    let ent: f64 = plan
        .plan
        .iter()
        .chain(plan.void.iter())
        .map(|&x| entropy(x))
        .sum();
    let sparsity: f64 = plan
        .plan
        .column_iter()
        .map(|c| c.iter().fold(0.0f64, |m, v| m.max(v.abs())))
        .sum();
    transport + void + cfg.epsilon * ent + cfg.eta * sparsity
}

/// Value of the concave dual function at `dual`, evaluated at `dual.epsilon`:
///
/// ```text
/// <1, λ> − R̃ <1, μ> − ε (Σ M + Σ m) + ε (|T||Ω| + |T|)
/// ```
///
/// This is the negated minimization-form objective plus the constant
/// contributed by the `+1` in the entropy, so it lower-bounds
/// [`primal_objective`] for any feasible `dual` (weak duality) and meets it at
/// the optimum.
pub fn dual_objective(dual: &DualState, cm: &CostMatrix, cfg: &SolverConfig) -> f64 {
    let eps = dual.epsilon;
    let mut mass = 0.0;
    for j in 0..cm.cols() {
        for i in 0..cm.rows() {
            mass += (dual.scaled_log_plan(cm, i, j) / eps).exp();
        }
    }
    for i in 0..cm.rows() {
        mass += ((dual.lambda[i] - cm.void[i]) / eps).exp();
    }
    let entries = (cm.rows() * cm.cols() + cm.rows()) as f64;
    dual.lambda.sum() - cfg.r_tilde * dual.mu.sum() - eps * mass + eps * entries
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveDiagnostics {
    pub iterations: usize,
    pub converged: bool,
    /// `‖M 1 + m − 1‖∞` after the last iteration's μ and Φ updates, measured
    /// with the λ that iteration started from.
    pub row_residual: f64,
    pub column_excess: f64,
    pub primal: f64,
    pub dual: f64,
    /// Number of ε stages run, including the final one.
    pub stages: usize,
    pub residual_trace: Vec<f64>,
    /// Dual objective after each iteration of the final ε stage.
    pub objective_trace: Vec<f64>,
}

impl SolveDiagnostics {
    pub fn relative_gap(&self) -> f64 {
        (self.primal - self.dual).abs() / self.primal.abs().max(1.0)
    }
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub plan: TransportPlan,
    pub dual: DualState,
    pub diagnostics: SolveDiagnostics,
}

/// ε values visited by the annealed solve, ending at `cfg.epsilon`.
fn epsilon_schedule(cm: &CostMatrix, cfg: &SolverConfig) -> Vec<f64> {
    if !cfg.anneal {
        return vec![cfg.epsilon];
    }
    // Above the void cost every row spreads over all columns and the void.
    let scale = cm.void.iter().fold(cfg.eta, |m, &v| m.max(v));
    let mut eps = scale.max(cfg.epsilon);
    let mut out = Vec::new();
    while eps > cfg.epsilon {
        out.push(eps);
        eps *= ANNEAL_FACTOR;
    }
    out.push(cfg.epsilon);
    out
}

/// A columnwise iteration visits every column at least this often; the ones
/// in between only visit columns that carry mass.
const FULL_SWEEP_EVERY: usize = 10;
/// Ratio between consecutive ε stages. With 0.1 the capacity multipliers
/// lag behind when a column has only a row or two too many, and the final
/// stage cannot catch up.
const ANNEAL_FACTOR: f64 = 0.5;
/// Iterations allowed at each intermediate ε before moving on.
const STAGE_ITERS: usize = 100;
/// Row residual accepted at intermediate ε.
const STAGE_TOL: f64 = 1e-4;

/// Maximizes the dual by exact block updates (see [`Sweep`]) until, at the
/// target ε, the row marginals match within `cfg.feas_tol` and no column
/// exceeds `R̃` by more than that, or `cfg.max_iter` iterations have run in
/// total across all ε stages. A non-converged result carries the last iterate.
pub fn sinkhorn_solve(cm: &CostMatrix, cfg: &SolverConfig) -> Result<Solution> {
    cfg.validate()?;
    let schedule = epsilon_schedule(cm, cfg);
    let mut dual = DualState::zeros(cm.rows(), cm.cols(), schedule[0]);
    let mut iterations = 0;
    let mut residual_trace = Vec::new();
    let mut objective_trace = Vec::new();
    let mut errors = (f64::INFINITY, f64::INFINITY);
    let mut converged = false;

    let mut rest = vec![0.0; cm.rows()];
    let mut scratch = vec![0.0; cm.rows()];
    let mut before = DVector::zeros(cm.rows());
    let all: Vec<usize> = (0..cm.cols()).collect();
    let mut live = all.clone();

    for (stage, &eps) in schedule.iter().enumerate() {
        let last = stage + 1 == schedule.len();
        dual.epsilon = eps;
        let (tol, budget) = if last {
            (cfg.feas_tol, cfg.max_iter.saturating_sub(iterations))
        } else {
            (
                STAGE_TOL,
                STAGE_ITERS.min(cfg.max_iter.saturating_sub(iterations)),
            )
        };
        if cfg.sweep == Sweep::Columnwise {
            // λ depends on ε; the sweep keeps it current afterwards.
            update_lambda(&mut dual, cm);
        }
        let mut since_full = 0;
        for _ in 0..budget {
            match cfg.sweep {
                Sweep::Alternating => {
                    update_lambda(&mut dual, cm);
                    update_mu(&mut dual, cm, cfg.r_tilde);
                    update_phi(&mut dual, cm, cfg.eta);
                    errors = marginal_errors(&dual, cm, cfg.r_tilde);
                }
                Sweep::Columnwise => {
                    let full = since_full == 0;
                    before.copy_from(&dual.lambda);
                    column_sweep(
                        &mut dual,
                        cm,
                        cfg,
                        if full { &all } else { &live },
                        &mut rest,
                        &mut scratch,
                    );
                    if full {
                        live = live_columns(&dual, cm);
                    }
                    // Row sums the sweep's μ and Φ give under the λ it started from.
                    let row = before
                        .iter()
                        .zip(dual.lambda.iter())
                        .map(|(b, l)| (((b - l) / eps).exp() - 1.0).abs())
                        .fold(0.0, f64::max);
                    since_full = (since_full + 1) % FULL_SWEEP_EVERY;
                    errors = if !full {
                        if row <= tol {
                            since_full = 0;
                        }
                        (row, f64::INFINITY)
                    } else if row <= tol {
                        (row, column_excess(&dual, cm, cfg.r_tilde))
                    } else {
                        (row, f64::INFINITY)
                    };
                }
            }
            iterations += 1;
            residual_trace.push(errors.0);
            if last && cfg.trace_objective {
                objective_trace.push(dual_objective(&dual, cm, cfg));
            }
            if errors.0 <= tol && errors.1 <= tol {
                converged = last;
                break;
            }
        }
    }

    errors.1 = column_excess(&dual, cm, cfg.r_tilde);
    let plan = dual.plan(cm);
    let primal = primal_objective(&plan, cm, cfg);
    let dual_value = dual_objective(&dual, cm, cfg);
    if plan
        .plan
        .iter()
        .chain(plan.void.iter())
        .any(|v| !v.is_finite())
    {
        return Err(Error::InvalidConfig(
            "transport solve produced non-finite values".into(),
        ));
    }
    Ok(Solution {
        plan,
        diagnostics: SolveDiagnostics {
            iterations,
            converged,
            row_residual: errors.0,
            column_excess: errors.1,
            primal,
            dual: dual_value,
            stages: schedule.len(),
            residual_trace,
            objective_trace,
        },
        dual,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Assignment {
    /// Slot in [`AssociationResult::selected`].
    Source(usize),
    Void,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Selected {
    /// Column (candidate) index.
    pub candidate: usize,
    /// Column maximum of the plan.
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssociationResult {
    pub selected: Vec<Selected>,
    pub assign: Vec<Assignment>,
}

/// Column maxima closer than this to the best remaining maximum count as tied.
///
/// Near the unregularized limit every opened column peaks at 1, so maxima
/// alone cannot rank them.
pub const SCORE_TIE_TOL: f64 = 1e-6;

/// How columns of the plan are ranked when picking sources.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ColumnScore {
    /// Largest entry of the column
    // Near-equal maxima (within SCORE_TIE_TOL) are ranked by column mass.
    Max,
    /// Column sum
    // The mixed-norm penalty charges the same for one full column as for a
    // source whose rows are spread over near-duplicate candidates. Maxima
    // drop under such a split, sums do not.
    #[default]
    Mass,
}

/// [`extract_selection_by`] with the default [`ColumnScore`].
pub fn extract_selection(plan: &TransportPlan, sources: usize) -> Result<AssociationResult> {
    extract_selection_by(plan, sources, ColumnScore::default())
}

/// Picks the `sources` best-scoring columns (ties to the lower index) and
/// assigns each row to its heaviest selected column, or to the void when the
/// void mass is at least as large.
pub fn extract_selection_by(
    plan: &TransportPlan,
    sources: usize,
    rule: ColumnScore,
) -> Result<AssociationResult> {
    let cols = plan.plan.ncols();
    if cols < sources {
        return Err(Error::TooFewCandidates {
            needed: sources,
            available: cols,
        });
    }
    let maxima: Vec<f64> = plan
        .plan
        .column_iter()
        .map(|c| c.iter().fold(0.0f64, |m, &v| m.max(v)))
        .collect();
    let mass: Vec<f64> = plan.plan.column_iter().map(|c| c.sum()).collect();
    let scores = match rule {
        ColumnScore::Max => &maxima,
        ColumnScore::Mass => &mass,
    };
    let mut by_score: Vec<usize> = (0..cols).collect();
    by_score.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let order = match rule {
        ColumnScore::Mass => by_score,
        ColumnScore::Max => {
            let mut order = Vec::with_capacity(cols);
            let mut rest = &by_score[..];
            while let Some(&lead) = rest.first() {
                let n = rest
                    .iter()
                    .take_while(|&&j| scores[lead] - scores[j] <= SCORE_TIE_TOL)
                    .count();
                let mut tie = rest[..n].to_vec();
                tie.sort_by(|&a, &b| mass[b].total_cmp(&mass[a]).then(a.cmp(&b)));
                order.extend(tie);
                rest = &rest[n..];
            }
            order
        }
    };
    let selected: Vec<Selected> = order[..sources]
        .iter()
        .map(|&j| Selected {
            candidate: j,
            score: scores[j],
        })
        .collect();

    let assign = (0..plan.plan.nrows())
        .map(|i| {
            let mut best = Assignment::Void;
            let mut best_mass = plan.void[i];
            for (slot, s) in selected.iter().enumerate() {
                let mass = plan.plan[(i, s.candidate)];
                if mass > best_mass {
                    best = Assignment::Source(slot);
                    best_mass = mass;
                }
            }
            best
        })
        .collect();
    Ok(AssociationResult { selected, assign })
}
