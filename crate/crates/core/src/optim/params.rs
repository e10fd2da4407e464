//! Flat per-primitive parameter layout shared by gradients and the optimizer.
//!
//! Rotations (`R` and `mu_O`) are addressed through left perturbations
//! `exp(d) * R`, so their three slots are tangent coordinates.

use nalgebra::Vector3;

use crate::hyper::HyperGaussian;
use crate::math::{so3_exp, TangentVector3};

pub const NUM_PARAMS: usize = 72;
pub type ParamVec = [f64; NUM_PARAMS];

pub const MU: usize = 0;
pub const SCALE: usize = 3;
pub const ROT: usize = 6;
pub const OPACITY: usize = 9;
pub const COLOR: usize = 10;
pub const DP: usize = 13;
pub const DSCALE: usize = 16;
pub const DROT: usize = 19;
pub const TIME: usize = 22;
pub const ORIENT: usize = 23;
/// Raw Cholesky factor, packed lower triangle (10 values).
pub const CHOL: usize = 26;
/// Cross-covariance, row-major 9x4 (36 values).
pub const CROSS: usize = 36;

/// Parameter groups that share a learning rate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    Position,
    Scale,
    Rotation,
    Opacity,
    Color,
    DynamicGeometry,
    Time,
    Orientation,
    Cholesky,
    Cross,
}

pub fn group(k: usize) -> Group {
    match k {
        MU..SCALE => Group::Position,
        SCALE..ROT => Group::Scale,
        ROT..OPACITY => Group::Rotation,
        OPACITY => Group::Opacity,
        COLOR..DP => Group::Color,
        DP..TIME => Group::DynamicGeometry,
        TIME => Group::Time,
        ORIENT..CHOL => Group::Orientation,
        CHOL..CROSS => Group::Cholesky,
        _ => Group::Cross,
    }
}

pub fn param_name(k: usize) -> String {
    let (name, base) = match group(k) {
        Group::Position => ("mu_p", MU),
        Group::Scale => ("scale", SCALE),
        Group::Rotation => ("rotation", ROT),
        Group::Opacity => ("opacity", OPACITY),
        Group::Color => ("color", COLOR),
        Group::DynamicGeometry => ("geometry_mean", DP),
        Group::Time => ("mu_t", TIME),
        Group::Orientation => ("mu_O", ORIENT),
        Group::Cholesky => ("L_tO", CHOL),
        Group::Cross => ("C_cross", CROSS),
    };
    format!("{name}[{}]", k - base)
}

fn axis(i: usize, delta: f64) -> TangentVector3 {
    let mut v = Vector3::zeros();
    v[i] = delta;
    TangentVector3(v)
}

/// Adds `delta` to coordinate `k` (rotations by left perturbation).
/// Invariants are not re-enforced.
pub fn perturb(hg: &mut HyperGaussian, k: usize, delta: f64) {
    match k {
        MU..SCALE => hg.mu_p[k - MU] += delta,
        SCALE..ROT => hg.scale[k - SCALE] += delta,
        ROT..OPACITY => hg.rotation = so3_exp(&axis(k - ROT, delta)) * hg.rotation,
        OPACITY => hg.opacity += delta,
        COLOR..DP => hg.color[k - COLOR] += delta,
        DP..DSCALE => hg.state.dp[k - DP] += delta,
        DSCALE..DROT => hg.state.dscale[k - DSCALE] += delta,
        DROT..TIME => hg.state.drot.0[k - DROT] += delta,
        TIME => hg.state.t += delta,
        ORIENT..CHOL => hg.state.orientation = so3_exp(&axis(k - ORIENT, delta)) * hg.state.orientation,
        CHOL..CROSS => {
            let mut p = hg.cov.packed();
            p[k - CHOL] += delta;
            hg.cov.set_packed(&p);
        }
        _ => {
            let i = k - CROSS;
            hg.cov.cross[(i / 4, i % 4)] += delta;
        }
    }
}

/// Applies `x <- x - step` for every coordinate, then re-enforces invariants.
pub fn apply_step(hg: &mut HyperGaussian, step: &ParamVec) {
    for k in 0..3 {
        hg.mu_p[k] -= step[MU + k];
        hg.scale[k] -= step[SCALE + k];
        hg.color[k] -= step[COLOR + k];
        hg.state.dp[k] -= step[DP + k];
        hg.state.dscale[k] -= step[DSCALE + k];
        hg.state.drot.0[k] -= step[DROT + k];
    }
    let rot = Vector3::new(step[ROT], step[ROT + 1], step[ROT + 2]);
    if rot != Vector3::zeros() {
        hg.rotation = so3_exp(&TangentVector3(-rot)) * hg.rotation;
    }
    let orient = Vector3::new(step[ORIENT], step[ORIENT + 1], step[ORIENT + 2]);
    if orient != Vector3::zeros() {
        hg.state.orientation = so3_exp(&TangentVector3(-orient)) * hg.state.orientation;
    }
    hg.opacity -= step[OPACITY];
    hg.state.t -= step[TIME];
    let mut p = hg.cov.packed();
    for (i, v) in p.iter_mut().enumerate() {
        *v -= step[CHOL + i];
    }
    hg.cov.set_packed(&p);
    for i in 0..36 {
        hg.cov.cross[(i / 4, i % 4)] -= step[CROSS + i];
    }
    hg.enforce_invariants();
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hyper::{DynamicStateMean, FactoredCovariance};
    use crate::math::Rotation;

    fn prim() -> HyperGaussian {
        HyperGaussian {
            id: 0,
            track: None,
            mu_p: Vector3::new(0.1, 0.2, 0.3),
            scale: Vector3::repeat(0.1),
            rotation: Rotation::from_axis_angle(&Vector3::x(), 0.4),
            opacity: 0.5,
            color: Vector3::repeat(0.5),
            state: DynamicStateMean::at(0.5, Rotation::identity()),
            cov: FactoredCovariance::isotropic(0.5),
        }
    }

    #[test]
    fn layout_covers_every_slot_once() {
        assert_eq!(CROSS + 36, NUM_PARAMS);
        let names: std::collections::BTreeSet<_> = (0..NUM_PARAMS).map(param_name).collect();
        assert_eq!(names.len(), NUM_PARAMS);
    }

    #[test]
    fn zero_step_changes_nothing() {
        let mut hg = prim();
        apply_step(&mut hg, &[0.0; NUM_PARAMS]);
        assert_eq!(hg, prim());
    }

    #[test]
    fn step_is_negative_perturbation() {
        for k in 0..NUM_PARAMS {
            let mut a = prim();
            perturb(&mut a, k, -0.01);
            a.enforce_invariants();
            let mut step = [0.0; NUM_PARAMS];
            step[k] = 0.01;
            let mut b = prim();
            apply_step(&mut b, &step);
            assert_eq!(a, b, "{}", param_name(k));
        }
    }
}
