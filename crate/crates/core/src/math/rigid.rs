//! Rigid transforms, unit dual quaternions and weighted blending.

use std::ops::Mul;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::math::rotation::Rotation;

const WEIGHT_SUM_TOL: f64 = 1e-9;
const DEGENERATE_NORM: f64 = 1e-9;

/// `x -> rotation * x + translation`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn new(rotation: Rotation, translation: Vector3<f64>) -> Self {
        RigidTransform {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        RigidTransform::new(Rotation::identity(), Vector3::zeros())
    }

    pub fn inverse(&self) -> Self {
        let inv = self.rotation.inverse();
        RigidTransform::new(inv, -inv.rotate(&self.translation))
    }

    pub fn apply_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.rotate(p) + self.translation
    }

    /// Applies the transform to an oriented point `(orientation, position)`.
    pub fn apply_pose(&self, orientation: &Rotation, position: &Vector3<f64>) -> (Rotation, Vector3<f64>) {
        (self.rotation * *orientation, self.apply_point(position))
    }

    pub fn to_dual_quaternion(&self) -> DualQuaternion {
        DualQuaternion::from_rigid(self)
    }
}

impl Mul for RigidTransform {
    type Output = RigidTransform;

    /// `(a * b)(x) = a(b(x))`.
    fn mul(self, rhs: RigidTransform) -> RigidTransform {
        RigidTransform::new(
            self.rotation * rhs.rotation,
            self.rotation.rotate(&rhs.translation) + self.translation,
        )
    }
}

/// `real + eps * dual`, with `real` a unit quaternion and `real . dual = 0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DualQuaternion {
    pub real: Quaternion<f64>,
    pub dual: Quaternion<f64>,
}

impl DualQuaternion {
    pub fn from_rigid(t: &RigidTransform) -> Self {
        let real = t.rotation.quaternion().into_inner();
        let tq = Quaternion::new(0.0, t.translation.x, t.translation.y, t.translation.z);
        DualQuaternion {
            real,
            dual: tq * real * 0.5,
        }
    }

    /// Recovers the rigid transform; assumes a (near) unit dual quaternion.
    pub fn to_rigid(&self) -> RigidTransform {
        let n = self.real.norm();
        let real = self.real / n;
        let dual = self.dual / n;
        let t = dual * real.conjugate() * 2.0;
        RigidTransform::new(
            Rotation::from_unit(UnitQuaternion::new_unchecked(real)),
            Vector3::new(t.i, t.j, t.k),
        )
    }

    pub fn scale(&self, w: f64) -> Self {
        DualQuaternion {
            real: self.real * w,
            dual: self.dual * w,
        }
    }

    pub fn negated(&self) -> Self {
        self.scale(-1.0)
    }
}

pub(crate) fn validate_weights(weights: &[f64], count: usize) -> Result<()> {
    if weights.is_empty() {
        return Err(Error::InvalidWeights("no entries to blend".into()));
    }
    if weights.len() != count {
        return Err(Error::InvalidWeights(format!(
            "{} weights for {} inputs",
            weights.len(),
            count
        )));
    }
    let mut sum = 0.0;
    for &w in weights {
        if !(w.is_finite() && w >= 0.0) {
            return Err(Error::InvalidWeights(format!("weight {w} is not a nonnegative real")));
        }
        sum += w;
    }
    if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
        return Err(Error::InvalidWeights(format!("weights sum to {sum}, not 1")));
    }
    Ok(())
}

/// Weighted linear blend of unit dual quaternions, sign-aligned to the
/// first entry and renormalized. The result keeps `real . dual = 0`.
pub fn blend_dual_quaternions(weights: &[f64], dqs: &[DualQuaternion]) -> Result<DualQuaternion> {
    validate_weights(weights, dqs.len())?;
    if dqs.len() == 1 {
        return Ok(dqs[0]);
    }
    let pivot = dqs[0].real;
    let mut real = Quaternion::new(0.0, 0.0, 0.0, 0.0);
    let mut dual = Quaternion::new(0.0, 0.0, 0.0, 0.0);
    for (&w, dq) in weights.iter().zip(dqs) {
        let w = if pivot.coords.dot(&dq.real.coords) < 0.0 { -w } else { w };
        real += dq.real * w;
        dual += dq.dual * w;
    }
    let norm = real.norm();
    if norm < DEGENERATE_NORM {
        return Err(Error::DegenerateBlend { norm });
    }
    let real = real / norm;
    let dual = dual / norm;
    let dual = dual - real * real.coords.dot(&dual.coords);
    Ok(DualQuaternion { real, dual })
}

/// Dual-quaternion linear blending of rigid transforms.
pub fn dq_blend(weights: &[f64], transforms: &[RigidTransform]) -> Result<RigidTransform> {
    validate_weights(weights, transforms.len())?;
    if transforms.len() == 1 {
        return Ok(transforms[0]);
    }
    let dqs: Vec<_> = transforms.iter().map(DualQuaternion::from_rigid).collect();
    Ok(blend_dual_quaternions(weights, &dqs)?.to_rigid())
}

/// Normalized, sign-aligned weighted quaternion average.
pub fn so3_blend(weights: &[f64], rotations: &[Rotation]) -> Result<Rotation> {
    validate_weights(weights, rotations.len())?;
    if rotations.len() == 1 {
        return Ok(rotations[0]);
    }
    let pivot = rotations[0].quaternion().coords;
    let mut acc = Quaternion::new(0.0, 0.0, 0.0, 0.0);
    for (&w, r) in weights.iter().zip(rotations) {
        let q = r.quaternion().into_inner();
        let w = if pivot.dot(&q.coords) < 0.0 { -w } else { w };
        acc += q * w;
    }
    let norm = acc.norm();
    if norm < DEGENERATE_NORM {
        return Err(Error::DegenerateBlend { norm });
    }
    Ok(Rotation::from_unit(UnitQuaternion::new_unchecked(acc / norm)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::rotation::{so3_exp, so3_log, TangentVector3};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};

    fn rz(angle: f64) -> Rotation {
        Rotation::from_axis_angle(&Vector3::z(), angle)
    }

    fn random_rotation_in_cone(rng: &mut impl Rng, max_angle: f64) -> Rotation {
        loop {
            let v = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            if v.norm() <= 1.0 {
                return so3_exp(&TangentVector3(v * max_angle));
            }
        }
    }

    /// Iterative intrinsic (Karcher) mean on SO(3).
    fn karcher_mean(weights: &[f64], rotations: &[Rotation]) -> Rotation {
        let mut mean = rotations[0];
        for _ in 0..100 {
            let mut step = Vector3::zeros();
            for (w, r) in weights.iter().zip(rotations) {
                step += so3_log(&(mean.inverse() * *r)).unwrap().0 * *w;
            }
            mean = mean * so3_exp(&TangentVector3(step));
            if step.norm() < 1e-14 {
                break;
            }
        }
        mean
    }

    #[test]
    fn inverse_composes_to_identity() {
        let t = RigidTransform::new(rz(0.7), Vector3::new(1.0, -2.0, 0.5));
        let id = t * t.inverse();
        assert!(id.rotation.angle() < 1e-12);
        assert_abs_diff_eq!(id.translation, Vector3::zeros(), epsilon = 1e-12);
    }

    #[test]
    fn dual_quaternion_round_trip() {
        let t = RigidTransform::new(rz(1.1), Vector3::new(0.3, 0.2, -4.0));
        let dq = t.to_dual_quaternion();
        assert_abs_diff_eq!(dq.real.coords.dot(&dq.dual.coords), 0.0, epsilon = 1e-12);
        let back = dq.to_rigid();
        assert!(back.rotation.angle_to(&t.rotation) < 1e-12);
        assert_abs_diff_eq!(back.translation, t.translation, epsilon = 1e-12);
    }

    #[test]
    fn single_entry_blends_are_exact() {
        let t = RigidTransform::new(rz(0.4), Vector3::new(1.0, 2.0, 3.0));
        assert_eq!(dq_blend(&[1.0], &[t]).unwrap(), t);
        assert_eq!(so3_blend(&[1.0], &[t.rotation]).unwrap(), t.rotation);
    }

    #[test]
    fn identical_transforms_fixed_point() {
        let t = RigidTransform::new(rz(0.4), Vector3::new(1.0, 2.0, 3.0));
        let b = dq_blend(&[0.5, 0.5], &[t, t]).unwrap();
        assert!(b.rotation.angle_to(&t.rotation) < 1e-12);
        assert_abs_diff_eq!(b.translation, t.translation, epsilon = 1e-12);
        let r = so3_blend(&[0.25, 0.75], &[t.rotation, t.rotation]).unwrap();
        assert!(r.angle_to(&t.rotation) < 1e-12);
    }

    #[test]
    fn two_rotation_average_bisects() {
        let a = RigidTransform::new(rz(0.0), Vector3::zeros());
        let b = RigidTransform::new(rz(FRAC_PI_2), Vector3::zeros());
        let blended = dq_blend(&[0.5, 0.5], &[a, b]).unwrap();
        assert!(blended.rotation.angle_to(&rz(FRAC_PI_4)) < 1e-12);
        assert_abs_diff_eq!(blended.translation, Vector3::zeros(), epsilon = 1e-12);
        let r = so3_blend(&[0.5, 0.5], &[a.rotation, b.rotation]).unwrap();
        assert!(r.angle_to(&rz(FRAC_PI_4)) < 1e-12);
    }

    #[test]
    fn antipodal_cancellation_is_reported() {
        // Both halves of the double cover of a half turn, with zero pivot weight.
        let a = Rotation::identity();
        let b = Rotation::from_wxyz(0.0, 1.0, 0.0, 0.0).unwrap();
        let c = Rotation::from_wxyz(0.0, -1.0, 0.0, 0.0).unwrap();
        let err = so3_blend(&[0.0, 0.5, 0.5], &[a, b, c]);
        assert!(matches!(err, Err(Error::DegenerateBlend { .. })));
    }

    #[test]
    fn weights_are_validated() {
        let r = Rotation::identity();
        assert!(matches!(so3_blend(&[0.5, 0.4], &[r, r]), Err(Error::InvalidWeights(_))));
        assert!(matches!(so3_blend(&[1.5, -0.5], &[r, r]), Err(Error::InvalidWeights(_))));
        assert!(matches!(so3_blend(&[], &[]), Err(Error::InvalidWeights(_))));
    }

    #[test]
    fn blend_close_to_karcher_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            // Pairwise spread at most 30 degrees around a random center.
            let center = random_rotation_in_cone(&mut rng, 3.0);
            let rotations: Vec<_> = (0..5)
                .map(|_| random_rotation_in_cone(&mut rng, 15f64.to_radians()) * center)
                .collect();
            let weights = [0.2; 5];
            let linear = so3_blend(&weights, &rotations).unwrap();
            let karcher = karcher_mean(&weights, &rotations);
            let gap = linear.angle_to(&karcher);
            assert!(gap < 1e-3, "gap {gap}");
        }
    }

    proptest! {
        #[test]
        fn blends_are_permutation_invariant(seed in 0u64..10_000, shift in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 4;
            let transforms: Vec<_> = (0..n)
                .map(|_| {
                    RigidTransform::new(
                        random_rotation_in_cone(&mut rng, 1.0),
                        Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.0),
                    )
                })
                .collect();
            let mut weights: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
            let s: f64 = weights.iter().sum();
            weights.iter_mut().for_each(|w| *w /= s);

            let mut pt = transforms.clone();
            let mut pw = weights.clone();
            pt.rotate_left(shift);
            pw.rotate_left(shift);

            let a = dq_blend(&weights, &transforms).unwrap();
            let b = dq_blend(&pw, &pt).unwrap();
            prop_assert!(a.rotation.angle_to(&b.rotation) < 1e-9);
            prop_assert!((a.translation - b.translation).norm() < 1e-9);

            let rots: Vec<_> = transforms.iter().map(|t| t.rotation).collect();
            let prots: Vec<_> = pt.iter().map(|t| t.rotation).collect();
            let ra = so3_blend(&weights, &rots).unwrap();
            let rb = so3_blend(&pw, &prots).unwrap();
            prop_assert!(ra.angle_to(&rb) < 1e-9);
        }

        #[test]
        fn rotation_only_blend_has_zero_translation(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let transforms: Vec<_> = (0..3)
                .map(|_| RigidTransform::new(random_rotation_in_cone(&mut rng, 1.2), Vector3::zeros()))
                .collect();
            let blended = dq_blend(&[0.2, 0.3, 0.5], &transforms).unwrap();
            prop_assert!(blended.translation.norm() < 1e-9);
        }
    }
}
