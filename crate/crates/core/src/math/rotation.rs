//! Unit-quaternion rotations and the SO(3) exponential / logarithm maps.

use std::ops::Mul;

use nalgebra::{Matrix3, Quaternion, Rotation3, Unit, UnitQuaternion, Vector3};

use crate::error::{Error, Result};

/// Logarithms closer than this to an angle of pi are rejected.
pub const BRANCH_EPS: f64 = 1e-6;

const SMALL_ANGLE: f64 = 1e-8;

/// Element of so(3): rotation axis scaled by the angle in radians.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TangentVector3(pub Vector3<f64>);

impl TangentVector3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        TangentVector3(Vector3::new(x, y, z))
    }

    pub fn zeros() -> Self {
        TangentVector3(Vector3::zeros())
    }

    pub fn norm(&self) -> f64 {
        self.0.norm()
    }
}

impl From<Vector3<f64>> for TangentVector3 {
    fn from(v: Vector3<f64>) -> Self {
        TangentVector3(v)
    }
}

/// A unit quaternion with the sign fixed so that `w >= 0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation(UnitQuaternion<f64>);

impl Default for Rotation {
    fn default() -> Self {
        Self::identity()
    }
}

impl Rotation {
    pub fn identity() -> Self {
        Rotation(UnitQuaternion::identity())
    }

    /// Normalizes and canonicalizes an arbitrary nonzero quaternion.
    pub fn from_wxyz(w: f64, x: f64, y: f64, z: f64) -> Result<Self> {
        let q = Quaternion::new(w, x, y, z);
        let n = q.norm();
        if !(n.is_finite() && n > 1e-12) {
            return Err(Error::DegenerateInput(format!(
                "quaternion ({w}, {x}, {y}, {z}) cannot be normalized"
            )));
        }
        // Leave already-unit input untouched so serialized values round-trip.
        let q = if (n - 1.0).abs() <= f64::EPSILON { q } else { q / n };
        Ok(Self::from_unit(UnitQuaternion::new_unchecked(q)))
    }

    /// Removes accumulated norm drift; idempotent.
    pub fn renormalize(&self) -> Self {
        let [w, x, y, z] = self.wxyz();
        Self::from_wxyz(w, x, y, z).expect("rotation quaternion is nonzero")
    }

    pub fn from_unit(q: UnitQuaternion<f64>) -> Self {
        if q.w < 0.0 {
            Rotation(UnitQuaternion::new_unchecked(-q.into_inner()))
        } else {
            Rotation(q)
        }
    }

    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        match Unit::try_new(*axis, 1e-15) {
            Some(axis) => Self::from_unit(UnitQuaternion::from_axis_angle(&axis, angle)),
            None => Self::identity(),
        }
    }

    /// Builds a rotation from a proper orthonormal matrix.
    pub fn from_matrix(m: &Matrix3<f64>) -> Self {
        let r = Rotation3::from_matrix_unchecked(*m);
        let q = UnitQuaternion::from_rotation_matrix(&r);
        // Polish the result: the matrix may be orthonormal only to rounding.
        Self::from_unit(UnitQuaternion::new_normalize(q.into_inner()))
    }

    pub fn quaternion(&self) -> &UnitQuaternion<f64> {
        &self.0
    }

    pub fn wxyz(&self) -> [f64; 4] {
        let q = self.0.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        self.0.to_rotation_matrix().into_inner()
    }

    pub fn inverse(&self) -> Self {
        Self::from_unit(self.0.inverse())
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }

    /// Geodesic angle between two rotations, in `[0, pi]`.
    pub fn angle_to(&self, other: &Rotation) -> f64 {
        let rel = self.0.inverse() * other.0;
        let q = rel.quaternion();
        2.0 * q.imag().norm().atan2(q.w.abs())
    }

    pub fn angle(&self) -> f64 {
        self.0.angle()
    }

    /// Spherical interpolation along the shortest arc; `t = 0` returns `self` exactly.
    pub fn slerp(&self, other: &Rotation, t: f64) -> Rotation {
        if t == 0.0 {
            return *self;
        }
        if t == 1.0 {
            return *other;
        }
        let mut b = other.0.into_inner();
        if self.0.coords.dot(&b.coords) < 0.0 {
            b = -b;
        }
        let b = UnitQuaternion::new_unchecked(b);
        match self.0.try_slerp(&b, t, 1e-12) {
            Some(q) => Self::from_unit(q),
            None => *self,
        }
    }

    pub fn exp(v: &TangentVector3) -> Rotation {
        so3_exp(v)
    }

    pub fn log(&self) -> Result<TangentVector3> {
        so3_log(self)
    }

    /// Logarithm without the branch check; at exactly pi the axis follows the
    /// canonical sign. Used for serialization, never for conditioning.
    pub fn log_unchecked(&self) -> TangentVector3 {
        let q = self.0.quaternion();
        let v = Vector3::new(q.i, q.j, q.k);
        log_from_parts(q.w, &v)
    }
}

impl Mul for Rotation {
    type Output = Rotation;

    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation::from_unit(self.0 * rhs.0)
    }
}

impl Mul<&Rotation> for &Rotation {
    type Output = Rotation;

    fn mul(self, rhs: &Rotation) -> Rotation {
        Rotation::from_unit(self.0 * rhs.0)
    }
}

pub fn so3_exp(v: &TangentVector3) -> Rotation {
    let theta = v.0.norm();
    let (w, s) = if theta < SMALL_ANGLE {
        (1.0 - theta * theta / 8.0, 0.5 - theta * theta / 48.0)
    } else {
        let half = 0.5 * theta;
        (half.cos(), half.sin() / theta)
    };
    let q = Quaternion::new(w, s * v.0.x, s * v.0.y, s * v.0.z);
    Rotation::from_unit(UnitQuaternion::new_normalize(q))
}

pub fn so3_log(r: &Rotation) -> Result<TangentVector3> {
    let q = r.0.quaternion();
    let v = Vector3::new(q.i, q.j, q.k);
    let angle = 2.0 * v.norm().atan2(q.w);
    if angle >= std::f64::consts::PI - BRANCH_EPS {
        return Err(Error::BranchAmbiguity { angle });
    }
    Ok(log_from_parts(q.w, &v))
}

fn log_from_parts(w: f64, v: &Vector3<f64>) -> TangentVector3 {
    let n = v.norm();
    let scale = if n < SMALL_ANGLE {
        2.0 / w * (1.0 - n * n / (3.0 * w * w))
    } else {
        2.0 * n.atan2(w) / n
    };
    TangentVector3(v * scale)
}

/// `log(a * b^-1)`: the tangent vector taking `b` to `a` by left multiplication.
pub fn rot_minus(a: &Rotation, b: &Rotation) -> Result<TangentVector3> {
    so3_log(&(a * &b.inverse()))
}

pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Right Jacobian of the exponential map: `exp(v + d) ~ exp(v) exp(J_r(v) d)`.
pub fn right_jacobian(v: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = v.norm_squared();
    let k = hat(v);
    let k2 = k * k;
    let (a, b) = if theta2 < 1e-10 {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        let theta = theta2.sqrt();
        ((1.0 - theta.cos()) / theta2, (theta - theta.sin()) / (theta2 * theta))
    };
    Matrix3::identity() - k * a + k2 * b
}

/// Inverse of [`right_jacobian`].
pub fn right_jacobian_inv(v: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = v.norm_squared();
    let k = hat(v);
    let k2 = k * k;
    let c = if theta2 < 1e-10 {
        1.0 / 12.0 + theta2 / 720.0
    } else {
        let theta = theta2.sqrt();
        1.0 / theta2 - (1.0 + theta.cos()) / (2.0 * theta * theta.sin())
    };
    Matrix3::identity() + k * 0.5 + k2 * c
}

/// Gradient of `tr(X * hat(d))` with respect to `d`.
pub(crate) fn skew_trace_grad(x: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(
        x[(1, 2)] - x[(2, 1)],
        x[(2, 0)] - x[(0, 2)],
        x[(0, 1)] - x[(1, 0)],
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_6, PI};

    fn random_tangent(rng: &mut impl Rng, max_norm: f64) -> TangentVector3 {
        loop {
            let v = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            if v.norm() <= 1.0 && v.norm() > 1e-3 {
                return TangentVector3(v * max_norm);
            }
        }
    }

    #[test]
    fn exp_quarter_turn_about_z() {
        let r = so3_exp(&TangentVector3::new(0.0, 0.0, FRAC_PI_2));
        let expected = Rotation::from_axis_angle(&Vector3::z(), FRAC_PI_2);
        assert!(r.angle_to(&expected) < 1e-12);
        assert_abs_diff_eq!(r.rotate(&Vector3::x()), Vector3::y(), epsilon = 1e-12);
    }

    #[test]
    fn log_identity_is_zero() {
        let v = so3_log(&Rotation::identity()).unwrap();
        assert_eq!(v.0, Vector3::zeros());
    }

    #[test]
    fn log_rejects_half_turn() {
        let r = Rotation::from_axis_angle(&Vector3::x(), PI);
        assert!(matches!(so3_log(&r), Err(Error::BranchAmbiguity { .. })));
        let near = Rotation::from_axis_angle(&Vector3::x(), PI - 1e-3);
        assert!(so3_log(&near).is_ok());
    }

    #[test]
    fn exp_log_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let v = random_tangent(&mut rng, 3.0);
            let back = so3_log(&so3_exp(&v)).unwrap();
            assert_abs_diff_eq!(back.0, v.0, epsilon = 1e-8);
        }
    }

    #[test]
    fn canonical_sign() {
        let r = Rotation::from_wxyz(-0.5, 0.5, 0.5, 0.5).unwrap();
        assert!(r.wxyz()[0] >= 0.0);
        let big = so3_exp(&TangentVector3::new(0.0, 3.5, 0.0));
        assert!(big.wxyz()[0] >= 0.0);
        assert!((big.quaternion().norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rot_minus_cases() {
        let a = Rotation::from_axis_angle(&Vector3::z(), FRAC_PI_6);
        assert_eq!(rot_minus(&a, &a).unwrap().0, Vector3::zeros());
        let v = rot_minus(&a, &Rotation::identity()).unwrap();
        assert_abs_diff_eq!(v.0, Vector3::new(0.0, 0.0, FRAC_PI_6), epsilon = 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let a = so3_exp(&random_tangent(&mut rng, 1.4));
            let b = so3_exp(&random_tangent(&mut rng, 1.4));
            let d = rot_minus(&a, &b).unwrap();
            let rebuilt = so3_exp(&d) * b;
            assert!(rebuilt.angle_to(&a) < 1e-8);
        }
    }

    #[test]
    fn right_jacobians_are_inverse_and_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let v = random_tangent(&mut rng, 2.5).0;
            let jr = right_jacobian(&v);
            let prod = jr * right_jacobian_inv(&v);
            assert_abs_diff_eq!(prod, Matrix3::identity(), epsilon = 1e-10);

            let base = so3_exp(&TangentVector3(v));
            let h = 1e-6;
            for axis in 0..3 {
                let mut d = Vector3::zeros();
                d[axis] = h;
                let plus = so3_exp(&TangentVector3(v + d));
                let local = so3_log(&(base.inverse() * plus)).unwrap().0 / h;
                assert_abs_diff_eq!(local, jr.column(axis).into_owned(), epsilon = 1e-5);
            }
        }
    }
}
