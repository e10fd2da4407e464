//! Anchor-guided deformation: primitives follow a dual-quaternion blend of the
//! relative motions of their nearest anchors.

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::{k_nearest, OrientationField};
use crate::hyper::{HyperGaussian, QueryContext};
use crate::math::{blend_dual_quaternions, so3_blend, DualQuaternion, RigidTransform, Rotation};

/// Ratio between the distance to the K-th neighbor and the RBF bandwidth.
pub const BANDWIDTH_DIVISOR: f64 = 4.0;

/// Soft assignment of a primitive to anchors.
#[derive(Clone, Debug, PartialEq)]
pub struct SkinningBinding {
    /// Anchor indices into the field, nearest first.
    pub anchors: Vec<usize>,
    pub weights: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DeformedPose {
    pub position: Vector3<f64>,
    pub rotation: Rotation,
    /// The blended rigid motion that produced this pose.
    pub transform: RigidTransform,
    pub context: QueryContext,
}

/// RBF weights over the `k` anchors nearest to `position` at frame 0:
/// `w ~ exp(-d^2 / (2 s^2))` with `s = d_k / 4`.
pub fn compute_skinning_weights(position: &Vector3<f64>, field: &OrientationField, k: usize) -> Result<SkinningBinding> {
    if k == 0 || field.len() < k {
        return Err(Error::DegenerateInput(format!(
            "skinning needs k={k} anchors, field has {}",
            field.len()
        )));
    }
    let rest = field.rest_positions();
    let ids = field.ids();
    let nearest = k_nearest(&rest, &ids, position, k);
    let d2_min = nearest[0].1;
    let d2_k = nearest[k - 1].1;
    let sigma2 = d2_k / (BANDWIDTH_DIVISOR * BANDWIDTH_DIVISOR);
    let raw: Vec<f64> = if sigma2 > 0.0 {
        nearest.iter().map(|&(_, d2)| (-(d2 - d2_min) / (2.0 * sigma2)).exp()).collect()
    } else {
        vec![1.0; k]
    };
    let total: f64 = raw.iter().sum();
    Ok(SkinningBinding {
        anchors: nearest.iter().map(|&(i, _)| i).collect(),
        weights: raw.iter().map(|w| w / total).collect(),
    })
}

/// Per-anchor quantities at one query time, shared by every primitive.
#[derive(Clone, Debug)]
pub struct FieldSnapshot {
    pub t_prime: f64,
    /// `dQ^{0 -> t'}` per anchor.
    pub transforms: Vec<RigidTransform>,
    pub dual: Vec<DualQuaternion>,
    pub orientations: Vec<Rotation>,
}

impl FieldSnapshot {
    pub fn new(field: &OrientationField, t_prime: f64) -> Result<Self> {
        let mut transforms = Vec::with_capacity(field.len());
        let mut orientations = Vec::with_capacity(field.len());
        let at_reference = field.bracket(t_prime)? == (0, 0, 0.0);
        for i in 0..field.len() {
            let pose = field.anchor_pose_at(i, t_prime)?;
            if at_reference {
                transforms.push(RigidTransform::identity());
            } else {
                transforms.push(pose * field.anchor_pose(i, 0)?.inverse());
            }
            orientations.push(pose.rotation);
        }
        let dual = transforms.iter().map(DualQuaternion::from_rigid).collect();
        Ok(FieldSnapshot {
            t_prime,
            transforms,
            dual,
            orientations,
        })
    }
}

/// Deforms one primitive's canonical pose to the snapshot time.
pub fn deform(hg: &HyperGaussian, binding: &SkinningBinding, snapshot: &FieldSnapshot) -> Result<DeformedPose> {
    for &i in &binding.anchors {
        if i >= snapshot.dual.len() {
            return Err(Error::IndexOutOfRange {
                index: i,
                len: snapshot.dual.len(),
            });
        }
    }
    let dqs: Vec<_> = binding.anchors.iter().map(|&i| snapshot.dual[i]).collect();
    let transform = blend_dual_quaternions(&binding.weights, &dqs)?.to_rigid();
    let transform = if binding.anchors.len() == 1 {
        snapshot.transforms[binding.anchors[0]]
    } else {
        transform
    };
    let rotations: Vec<_> = binding.anchors.iter().map(|&i| snapshot.orientations[i]).collect();
    let orientation = so3_blend(&binding.weights, &rotations)?;
    Ok(DeformedPose {
        position: transform.apply_point(&hg.mu_p),
        rotation: transform.rotation * hg.rotation,
        transform,
        context: QueryContext {
            t_prime: snapshot.t_prime,
            orientation,
        },
    })
}

/// Deforms every primitive; output order matches input order.
pub fn deform_all(
    primitives: &[HyperGaussian],
    bindings: &[SkinningBinding],
    snapshot: &FieldSnapshot,
) -> Result<Vec<DeformedPose>> {
    if primitives.len() != bindings.len() {
        return Err(Error::Consistency(format!(
            "{} primitives but {} bindings",
            primitives.len(),
            bindings.len()
        )));
    }
    primitives
        .par_iter()
        .zip(bindings.par_iter())
        .map(|(hg, b)| deform(hg, b, snapshot))
        .collect()
}
