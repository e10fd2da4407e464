use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::math::pca::centroid;
use crate::math::rotation::Rotation;

/// Relative singular-value threshold below which the cross-covariance is
/// treated as rank deficient (rank < 2 leaves the rotation underdetermined).
const RANK_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug)]
pub struct Alignment {
    pub rotation: Rotation,
    /// True when the point sets do not determine a unique rotation.
    pub rank_deficient: bool,
}

/// Least-squares rotation `R` minimizing `sum |t_k - c_t - R (s_k - c_s)|^2`.
/// Both sets are centered internally.
pub fn kabsch(source: &[Vector3<f64>], target: &[Vector3<f64>]) -> Result<Alignment> {
    if source.len() != target.len() {
        return Err(Error::DegenerateInput(format!(
            "point sets differ in size: {} vs {}",
            source.len(),
            target.len()
        )));
    }
    if source.len() < 3 {
        return Err(Error::DegenerateInput(format!(
            "alignment needs at least 3 points, got {}",
            source.len()
        )));
    }
    let cs = centroid(source);
    let ct = centroid(target);
    let mut h = Matrix3::zeros();
    for (s, t) in source.iter().zip(target) {
        h += (s - cs) * (t - ct).transpose();
    }
    Ok(align_from_cross_covariance(&h))
}

/// Rotation from `H = sum s_k t_k^T` (centered): `R = V diag(1, 1, d) U^T`.
pub(crate) fn align_from_cross_covariance(h: &Matrix3<f64>) -> Alignment {
    let svd = h.svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested V^T");
    let s = svd.singular_values;

    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    let u = Matrix3::from_columns(&order.map(|i| u.column(i).into_owned()));
    let v = Matrix3::from_columns(&order.map(|i| v_t.row(i).transpose()));
    let sorted = order.map(|i| s[i]);

    let d = (v * u.transpose()).determinant().signum();
    let d = if d == 0.0 { 1.0 } else { d };
    let r = v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * u.transpose();

    let scale = sorted[0].max(f64::MIN_POSITIVE);
    let rank_deficient = sorted[0] < 1e-300 || sorted[1] / scale < RANK_TOL;
    Alignment {
        rotation: Rotation::from_matrix(&orthonormalize(&r)),
        rank_deficient,
    }
}

fn orthonormalize(m: &Matrix3<f64>) -> Matrix3<f64> {
    let x = m.column(0).normalize();
    let y = (m.column(1) - x * x.dot(&m.column(1))).normalize();
    let z = x.cross(&y);
    Matrix3::from_columns(&[x, y, z])
}

pub fn alignment_residual(rotation: &Rotation, source: &[Vector3<f64>], target: &[Vector3<f64>]) -> f64 {
    let cs = centroid(source);
    let ct = centroid(target);
    source
        .iter()
        .zip(target)
        .map(|(s, t)| ((t - ct) - rotation.rotate(&(s - cs))).norm_squared())
        .sum()
}
