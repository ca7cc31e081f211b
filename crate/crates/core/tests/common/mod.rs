//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use itertools::Itertools;
use nalgebra::{DMatrix, Matrix3, Vector3};
use tdoa_assoc::scene::{Point3, ReceiverPair};

/// Exhaustive minimum of the integer association problem: choose `s` columns,
/// give each exactly `cap` rows, every row to one chosen column. Returns the
/// optimal cost and every optimal column support (sorted).
pub fn integer_optimum(cost: &DMatrix<f64>, s: usize, cap: usize) -> (f64, Vec<Vec<usize>>) {
    let (rows, cols) = cost.shape();
    assert_eq!(rows, s * cap);
    let mut best = f64::INFINITY;
    let mut supports: Vec<Vec<usize>> = Vec::new();
    for support in (0..cols).combinations(s) {
        let mut local = f64::INFINITY;
        for assign in (0..rows).map(|_| 0..s).multi_cartesian_product() {
            let mut load = vec![0usize; s];
            for &a in &assign {
                load[a] += 1;
            }
            if load.iter().any(|&l| l != cap) {
                continue;
            }
            let c: f64 = assign
                .iter()
                .enumerate()
                .map(|(i, &a)| cost[(i, support[a])])
                .sum();
            local = local.min(c);
        }
        if local < best - 1e-12 {
            best = local;
            supports = vec![support];
        } else if (local - best).abs() <= 1e-12 {
            supports.push(support);
        }
    }
    (best, supports)
}

/// Brute-force minimizer of `Σ y_i exp(x_i)` over `‖x‖₁ ≤ p` by enumerating
/// active sets. On an active set `A` the stationary point has
/// `y_i exp(x_i)` constant; candidates with a positive coordinate are
/// infeasible-for-optimality and skipped. The best objective wins.
pub fn gamma_bruteforce(y: &[f64], p: f64) -> (Vec<f64>, f64) {
    let n = y.len();
    let obj = |x: &[f64]| -> f64 { x.iter().zip(y).map(|(xi, yi)| yi * xi.exp()).sum() };
    let mut best_x = vec![0.0; n];
    let mut best = obj(&best_x);
    let positive: Vec<usize> = (0..n).filter(|&i| y[i] > 0.0).collect();
    for k in 1..=positive.len() {
        for set in positive.iter().copied().combinations(k) {
            let log_nu = (set.iter().map(|&i| y[i].ln()).sum::<f64>() - p) / k as f64;
            let mut x = vec![0.0; n];
            let mut ok = true;
            for &i in &set {
                x[i] = log_nu - y[i].ln();
                if x[i] > 1e-15 {
                    ok = false;
                }
            }
            if !ok {
                continue;
            }
            let f = obj(&x);
            if f < best {
                best = f;
                best_x = x;
            }
        }
    }
    (best_x, best)
}

/// Gaussian TDOA log-likelihood of `x` given exact data at `truth`, without
/// constants.
fn log_likelihood(
    x: &Point3,
    truth: &Point3,
    pairs: &[ReceiverPair],
    rx: &[Point3],
    sigma: f64,
) -> f64 {
    pairs
        .iter()
        .map(|p| {
            let f = |s: &Point3| (s - rx[p.k]).norm() - (s - rx[p.l]).norm();
            let r = f(truth) - f(x);
            -0.5 * r * r / (sigma * sigma)
        })
        .sum()
}

/// Fisher information as the negated central-difference Hessian of the
/// expected log-likelihood at the truth (where the residual vanishes, so the
/// Hessian equals the outer-product form).
pub fn fisher_fd(
    s: &Point3,
    pairs: &[ReceiverPair],
    rx: &[Point3],
    sigma: f64,
    h: f64,
) -> Matrix3<f64> {
    let e = |i: usize| {
        let mut v = Vector3::zeros();
        v[i] = h;
        v
    };
    let ll = |x: Point3| log_likelihood(&x, s, pairs, rx, sigma);
    Matrix3::from_fn(|a, b| {
        let (ea, eb) = (e(a), e(b));
        let v = ll(s + ea + eb) - ll(s + ea - eb) - ll(s - ea + eb) + ll(s - ea - eb);
        -v / (4.0 * h * h)
    })
}
