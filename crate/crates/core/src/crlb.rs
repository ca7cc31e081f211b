//! Fisher information and root Cramér–Rao bound for a single source under
//! independent Gaussian TDOA errors.

use nalgebra::Matrix3;

use crate::error::{Error, Result};
use crate::scene::{Point3, ReceiverPair};

/// Condition number above which the information matrix counts as singular.
pub const MAX_CONDITION: f64 = 1e12;

/// Fisher information matrix of a source position, in 1/m².
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FisherInfo(pub Matrix3<f64>);

/// `J = σ⁻² Σ g gᵀ` with `g = (s − r_k)/‖s − r_k‖ − (s − r_l)/‖s − r_l‖`.
pub fn fisher_information(
    source: &Point3,
    pairs: &[ReceiverPair],
    receivers: &[Point3],
    sigma: f64,
) -> Result<FisherInfo> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "sigma must be > 0, got {sigma}"
        )));
    }
    if let Some(r) = receivers.iter().position(|r| (source - r).norm() < 1e-9) {
        return Err(Error::SourceAtReceiver(r));
    }
    let mut j = Matrix3::zeros();
    for p in pairs {
        let dk = source - receivers[p.k];
        let dl = source - receivers[p.l];
        let g = dk / dk.norm() - dl / dl.norm();
        j += g * g.transpose();
    }
    Ok(FisherInfo(j / (sigma * sigma)))
}

impl FisherInfo {
    /// Ratio of largest to smallest eigenvalue; infinite when the smallest is
    /// not positive.
    pub fn condition(&self) -> f64 {
        let ev = self.0.symmetric_eigenvalues();
        let lo = ev.min();
        let hi = ev.max();
        if lo <= 0.0 {
            f64::INFINITY
        } else {
            hi / lo
        }
    }

    /// Inverse by adjugate, `None` when singular.
    pub fn inverse(&self) -> Option<Matrix3<f64>> {
        let m = &self.0;
        let cof = |r0: usize, r1: usize, c0: usize, c1: usize| {
            m[(r0, c0)] * m[(r1, c1)] - m[(r0, c1)] * m[(r1, c0)]
        };
        let adj = Matrix3::new(
            cof(1, 2, 1, 2),
            -cof(0, 2, 1, 2),
            cof(0, 1, 1, 2),
            -cof(1, 2, 0, 2),
            cof(0, 2, 0, 2),
            -cof(0, 1, 0, 2),
            cof(1, 2, 0, 1),
            -cof(0, 2, 0, 1),
            cof(0, 1, 0, 1),
        );
        let det = m[(0, 0)] * adj[(0, 0)] + m[(0, 1)] * adj[(1, 0)] + m[(0, 2)] * adj[(2, 0)];
        if det == 0.0 || !det.is_finite() {
            None
        } else {
            Some(adj / det)
        }
    }

    /// `sqrt(trace(J⁻¹))`, or +∞ when the condition number exceeds
    /// [`MAX_CONDITION`].
    pub fn root_crlb(&self) -> f64 {
        if self.condition() > MAX_CONDITION {
            return f64::INFINITY;
        }
        match self.inverse() {
            Some(inv) => inv.trace().max(0.0).sqrt(),
            None => f64::INFINITY,
        }
    }
}

/// Root CRLB in meters; +∞ flags an unidentifiable geometry.
pub fn root_crlb(
    source: &Point3,
    pairs: &[ReceiverPair],
    receivers: &[Point3],
    sigma: f64,
) -> Result<f64> {
    Ok(fisher_information(source, pairs, receivers, sigma)?.root_crlb())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, Room};
    use crate::seed::rng_from;

    #[test]
    fn sigma_scaling() {
        let scene = generate_scene(12, 1, Room::default(), &mut rng_from(&[30])).unwrap();
        let pairs = ReceiverPair::all(12);
        let s = scene.sources[0];
        let j1 = fisher_information(&s, &pairs, &scene.receivers, 0.03).unwrap();
        let j2 = fisher_information(&s, &pairs, &scene.receivers, 0.06).unwrap();
        assert!((j1.0 - j2.0 * 4.0).norm() <= 1e-9 * j1.0.norm());
        let c1 = j1.root_crlb();
        let c2 = j2.root_crlb();
        assert!((c2 - 2.0 * c1).abs() <= 1e-12 * c2);
    }

    #[test]
    fn rejects_bad_inputs() {
        let rx = vec![Point3::zeros(), Point3::new(1.0, 0.0, 0.0)];
        let pairs = [ReceiverPair { k: 0, l: 1 }];
        assert!(fisher_information(&Point3::zeros(), &pairs, &rx, 0.1).is_err());
        assert!(fisher_information(&Point3::new(0.0, 1.0, 0.0), &pairs, &rx, 0.0).is_err());
    }

    #[test]
    fn collinear_receivers_are_singular() {
        let rx: Vec<Point3> = (0..4).map(|i| Point3::new(i as f64, 0.0, 0.0)).collect();
        let pairs = [
            ReceiverPair { k: 0, l: 1 },
            ReceiverPair { k: 2, l: 3 },
            ReceiverPair { k: 0, l: 2 },
        ];
        // On the axis every gradient is parallel to it.
        let s = Point3::new(-3.0, 0.0, 0.0);
        assert_eq!(root_crlb(&s, &pairs, &rx, 0.03).unwrap(), f64::INFINITY);
    }

    #[test]
    fn adjugate_inverse() {
        let m = Matrix3::new(4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0);
        let inv = FisherInfo(m).inverse().unwrap();
        assert!((m * inv - Matrix3::identity()).norm() < 1e-14);
    }
}
