//! Hyper-Gaussians: splatting primitives with a 13-dimensional Gaussian over
//! (position offset, scale offset, rotation offset, time, orientation).
//!
//! The geometry block is predicted by conditioning on the observed
//! `(t', O')`; the same residual also attenuates opacity.

use std::str::FromStr;

use nalgebra::{Matrix3, Matrix4, SMatrix, SVector, Vector3, Vector4};

use crate::error::{Error, Result};
use crate::math::{right_jacobian_inv, rot_minus, so3_exp, Rotation, TangentVector3};

/// Floor on the diagonal of the time/orientation Cholesky factor.
pub const EPS_DIAG: f64 = 1e-4;
/// Lower bound on every scale component.
pub const EPS_SCALE: f64 = 1e-6;
/// Sharpness of the softplus floor on the Cholesky diagonal.
const FLOOR_SHARPNESS: f64 = 100.0;

pub type Mat9x4 = SMatrix<f64, 9, 4>;
pub type Mat9 = SMatrix<f64, 9, 9>;
pub type Vec9 = SVector<f64, 9>;

/// Smooth floor `eps + softplus(k (d - eps)) / k` and its derivative.
pub fn floor_diag(d: f64) -> (f64, f64) {
    let x = FLOOR_SHARPNESS * (d - EPS_DIAG);
    let softplus = x.max(0.0) + (-x.abs()).exp().ln_1p();
    let sigmoid = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    (EPS_DIAG + softplus / FLOOR_SHARPNESS, sigmoid)
}

/// Which parts of the conditioning model are active.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum ConditioningMode {
    /// Anchor-driven deformation only: no conditioned offset, no confidence.
    AnchorOnly,
    /// Condition on time alone (orientation rows and columns unused).
    TimeOnly,
    /// Condition on time and orientation.
    #[default]
    Full,
}

impl FromStr for ConditioningMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "anchor" | "anchor-only" => Ok(ConditioningMode::AnchorOnly),
            "time" | "time-only" => Ok(ConditioningMode::TimeOnly),
            "full" => Ok(ConditioningMode::Full),
            other => Err(Error::Config(format!("unknown variant '{other}' (expected anchor, time or full)"))),
        }
    }
}

impl std::fmt::Display for ConditioningMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ConditioningMode::AnchorOnly => "anchor",
            ConditioningMode::TimeOnly => "time",
            ConditioningMode::Full => "full",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DynamicStateMean {
    pub dp: Vector3<f64>,
    pub dscale: Vector3<f64>,
    pub drot: TangentVector3,
    /// Normalized time in `[0, 1]`.
    pub t: f64,
    pub orientation: Rotation,
}

impl DynamicStateMean {
    pub fn at(t: f64, orientation: Rotation) -> Self {
        DynamicStateMean {
            dp: Vector3::zeros(),
            dscale: Vector3::zeros(),
            drot: TangentVector3::zeros(),
            t,
            orientation,
        }
    }

    /// Geometry block `[dp, dscale, drot]`.
    pub fn geometry(&self) -> Vec9 {
        let mut m = Vec9::zeros();
        m.fixed_rows_mut::<3>(0).copy_from(&self.dp);
        m.fixed_rows_mut::<3>(3).copy_from(&self.dscale);
        m.fixed_rows_mut::<3>(6).copy_from(&self.drot.0);
        m
    }
}

/// `Sigma_(t,O) = L L^T` with a floored diagonal, plus the 9x4 cross-covariance
/// between the geometry block and `(t, O)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FactoredCovariance {
    /// Lower triangle holds the raw parameters; the diagonal is floored on read.
    pub l_raw: Matrix4<f64>,
    pub cross: Mat9x4,
}

impl FactoredCovariance {
    pub fn new(l_raw: Matrix4<f64>, cross: Mat9x4) -> Self {
        FactoredCovariance {
            l_raw: l_raw.lower_triangle(),
            cross,
        }
    }

    pub fn isotropic(diag: f64) -> Self {
        Self::new(Matrix4::identity() * diag, Mat9x4::zeros())
    }

    /// Cholesky factor with the diagonal floor applied.
    pub fn cholesky(&self) -> Matrix4<f64> {
        let mut l = self.l_raw.lower_triangle();
        for i in 0..4 {
            l[(i, i)] = floor_diag(l[(i, i)]).0;
        }
        l
    }

    pub fn marginal(&self) -> Matrix4<f64> {
        let l = self.cholesky();
        l * l.transpose()
    }

    /// Raw lower triangle, row-major: `l00, l10, l11, l20, l21, l22, l30, ...`.
    pub fn packed(&self) -> [f64; 10] {
        let mut out = [0.0; 10];
        let mut k = 0;
        for i in 0..4 {
            for j in 0..=i {
                out[k] = self.l_raw[(i, j)];
                k += 1;
            }
        }
        out
    }

    pub fn set_packed(&mut self, packed: &[f64]) {
        let mut k = 0;
        for i in 0..4 {
            for j in 0..=i {
                self.l_raw[(i, j)] = packed[k];
                k += 1;
            }
        }
    }

    /// Re-enforces the lower-triangular shape and the diagonal floor on the raw values.
    pub fn enforce(&mut self) {
        self.l_raw = self.l_raw.lower_triangle();
        for i in 0..4 {
            if self.l_raw[(i, i)] < EPS_DIAG {
                self.l_raw[(i, i)] = EPS_DIAG;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HyperGaussian {
    pub id: u64,
    /// Track seeding this primitive, if any.
    pub track: Option<usize>,
    pub mu_p: Vector3<f64>,
    pub scale: Vector3<f64>,
    pub rotation: Rotation,
    pub opacity: f64,
    pub color: Vector3<f64>,
    pub state: DynamicStateMean,
    pub cov: FactoredCovariance,
}

impl HyperGaussian {
    /// Renormalizes rotations, clamps scale, opacity and color and re-floors
    /// the covariance.
    pub fn enforce_invariants(&mut self) {
        self.rotation = self.rotation.renormalize();
        self.state.orientation = self.state.orientation.renormalize();
        self.scale = self.scale.map(|s| s.max(EPS_SCALE));
        self.opacity = self.opacity.clamp(0.0, 1.0);
        self.color = self.color.map(|c| c.clamp(0.0, 1.0));
        self.state.t = self.state.t.clamp(0.0, 1.0);
        self.cov.enforce();
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QueryContext {
    pub t_prime: f64,
    pub orientation: Rotation,
}

/// Conditioned geometry offsets.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConditionalMean {
    pub dp: Vector3<f64>,
    pub dscale: Vector3<f64>,
    pub drot: TangentVector3,
}

impl ConditionalMean {
    pub fn from_vector(v: &Vec9) -> Self {
        ConditionalMean {
            dp: v.fixed_rows::<3>(0).into_owned(),
            dscale: v.fixed_rows::<3>(3).into_owned(),
            drot: TangentVector3(v.fixed_rows::<3>(6).into_owned()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModulatedGeometry {
    pub mu_p: Vector3<f64>,
    pub scale: Vector3<f64>,
    pub rotation: Rotation,
}

/// `[t' - mu_t, O' (-) mu_O]`.
pub fn residual(ctx: &QueryContext, state: &DynamicStateMean) -> Result<Vector4<f64>> {
    let phi = rot_minus(&ctx.orientation, &state.orientation)?;
    Ok(Vector4::new(ctx.t_prime - state.t, phi.0.x, phi.0.y, phi.0.z))
}

/// `mu_geom + C Sigma^-1 r`, with `Sigma^-1` applied by two triangular solves.
pub fn condition_mean(hg: &HyperGaussian, ctx: &QueryContext) -> Result<ConditionalMean> {
    let eval = evaluate(hg, ctx, ConditioningMode::Full)?;
    Ok(ConditionalMean::from_vector(&eval.offset))
}

fn solve_marginal(l: &Matrix4<f64>, r: &Vector4<f64>) -> Result<Vector4<f64>> {
    let y = l
        .solve_lower_triangular(r)
        .ok_or_else(|| Error::Numerical("singular Cholesky factor".into()))?;
    l.transpose()
        .solve_upper_triangular(&y)
        .ok_or_else(|| Error::Numerical("singular Cholesky factor".into()))
}

/// Conditional covariance `M - C Sigma^-1 C^T` for a given geometry marginal `M`.
pub fn condition_covariance(hg: &HyperGaussian, marginal_geom: &Mat9) -> Result<Mat9> {
    let sym = (marginal_geom + marginal_geom.transpose()) * 0.5;
    if (marginal_geom - sym).amax() > 1e-12 * marginal_geom.amax().max(1.0) || sym.cholesky().is_none() {
        return Err(Error::Numerical("geometry marginal is not symmetric positive definite".into()));
    }
    let l = hg.cov.cholesky();
    let x = l
        .solve_lower_triangular(&hg.cov.cross.transpose())
        .ok_or_else(|| Error::Numerical("singular Cholesky factor".into()))?;
    let out = sym - x.transpose() * x;
    Ok((out + out.transpose()) * 0.5)
}

/// Applies conditioned offsets to an anchor-deformed pose:
/// `mu = mu_def + dp`, `S = max(S + dscale, eps)`, `R = R_def * exp(drot)`.
pub fn modulate_geometry(
    hg: &HyperGaussian,
    deformed_mu_p: &Vector3<f64>,
    deformed_rotation: &Rotation,
    ctx: &QueryContext,
) -> Result<ModulatedGeometry> {
    let cond = condition_mean(hg, ctx)?;
    Ok(apply_offsets(hg, deformed_mu_p, deformed_rotation, &cond))
}

pub fn apply_offsets(
    hg: &HyperGaussian,
    deformed_mu_p: &Vector3<f64>,
    deformed_rotation: &Rotation,
    cond: &ConditionalMean,
) -> ModulatedGeometry {
    ModulatedGeometry {
        mu_p: deformed_mu_p + cond.dp,
        scale: (hg.scale + cond.dscale).map(|s| s.max(EPS_SCALE)),
        rotation: *deformed_rotation * so3_exp(&cond.drot),
    }
}

/// `sigma * exp(-1/2 [r_t^2 / Sigma_t + phi^T Sigma_O^-1 phi])`.
pub fn modulate_opacity(hg: &HyperGaussian, ctx: &QueryContext) -> Result<f64> {
    Ok(evaluate(hg, ctx, ConditioningMode::Full)?.opacity)
}

/// Forward quantities of one query, kept for the backward pass.
#[derive(Clone, Copy, Debug)]
pub struct HyperEval {
    pub mode: ConditioningMode,
    pub residual: Vector4<f64>,
    /// Conditioned geometry `[dp, dscale, drot]`.
    pub offset: Vec9,
    /// Confidence factor in `(0, 1]`.
    pub gate: f64,
    /// Modulated opacity `sigma * gate`.
    pub opacity: f64,
    l: Matrix4<f64>,
    /// `Sigma^-1 r` (only the first entry in time-only mode).
    z: Vector4<f64>,
    /// `Sigma_O^-1 phi`.
    y: Vector3<f64>,
}

pub fn evaluate(hg: &HyperGaussian, ctx: &QueryContext, mode: ConditioningMode) -> Result<HyperEval> {
    let m0 = hg.state.geometry();
    let l = hg.cov.cholesky();
    let mut eval = HyperEval {
        mode,
        residual: Vector4::zeros(),
        offset: m0,
        gate: 1.0,
        opacity: hg.opacity,
        l,
        z: Vector4::zeros(),
        y: Vector3::zeros(),
    };
    match mode {
        ConditioningMode::AnchorOnly => {}
        ConditioningMode::TimeOnly => {
            let r0 = ctx.t_prime - hg.state.t;
            let s = l[(0, 0)] * l[(0, 0)];
            let z0 = r0 / s;
            eval.residual = Vector4::new(r0, 0.0, 0.0, 0.0);
            eval.z = Vector4::new(z0, 0.0, 0.0, 0.0);
            eval.offset = m0 + hg.cov.cross.column(0) * z0;
            eval.gate = (-0.5 * r0 * r0 / s).exp();
        }
        ConditioningMode::Full => {
            let r = residual(ctx, &hg.state)?;
            let z = solve_marginal(&l, &r)?;
            let sigma = l * l.transpose();
            let s_t = sigma[(0, 0)];
            let s_o: Matrix3<f64> = sigma.fixed_view::<3, 3>(1, 1).into_owned();
            let phi = r.fixed_rows::<3>(1).into_owned();
            let y = s_o
                .cholesky()
                .ok_or_else(|| Error::Numerical("orientation marginal is not positive definite".into()))?
                .solve(&phi);
            let q = r[0] * r[0] / s_t + phi.dot(&y);
            eval.residual = r;
            eval.z = z;
            eval.y = y;
            eval.offset = m0 + hg.cov.cross * z;
            eval.gate = (-0.5 * q).exp();
        }
    }
    eval.opacity = hg.opacity * eval.gate;
    Ok(eval)
}

/// Gradients with respect to one primitive's dynamic-state parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StateGrad {
    /// Gradient of the geometry mean block `[dp, dscale, drot]`.
    pub geometry: Vec9,
    pub t: f64,
    /// Left-perturbation gradient of `mu_O`.
    pub orientation: Vector3<f64>,
    /// Gradient of the raw lower-triangular factor.
    pub l_raw: Matrix4<f64>,
    pub cross: Mat9x4,
    /// Gradient of the base opacity.
    pub opacity: f64,
}

/// Back-propagates upstream gradients of the conditioned offset and of the
/// modulated opacity into the state parameters.
pub fn evaluate_backward(hg: &HyperGaussian, eval: &HyperEval, g_offset: &Vec9, g_opacity: f64) -> StateGrad {
    let mut grad = StateGrad {
        geometry: *g_offset,
        t: 0.0,
        orientation: Vector3::zeros(),
        l_raw: Matrix4::zeros(),
        cross: Mat9x4::zeros(),
        opacity: g_opacity * eval.gate,
    };
    let g_q = -0.5 * g_opacity * hg.opacity * eval.gate;
    let l = eval.l;
    let r = eval.residual;
    let mut g_l = Matrix4::zeros();
    let mut g_r = Vector4::zeros();
    match eval.mode {
        ConditioningMode::AnchorOnly => return grad,
        ConditioningMode::TimeOnly => {
            let s = l[(0, 0)] * l[(0, 0)];
            let z0 = eval.z[0];
            grad.cross.set_column(0, &(g_offset * z0));
            let g_z0 = hg.cov.cross.column(0).dot(g_offset);
            g_r[0] = g_z0 / s + g_q * 2.0 * r[0] / s;
            let g_s = -g_z0 * r[0] / (s * s) - g_q * r[0] * r[0] / (s * s);
            g_l[(0, 0)] = g_s * 2.0 * l[(0, 0)];
        }
        ConditioningMode::Full => {
            let z = eval.z;
            grad.cross = g_offset * z.transpose();
            let ct_g = hg.cov.cross.transpose() * g_offset;
            let w = solve_marginal(&l, &ct_g).expect("factor was solvable in the forward pass");
            g_r += w;
            let mut g_sigma = -(w * z.transpose());

            let sigma = l * l.transpose();
            let s_t = sigma[(0, 0)];
            g_r[0] += g_q * 2.0 * r[0] / s_t;
            g_sigma[(0, 0)] += -g_q * r[0] * r[0] / (s_t * s_t);
            let y = eval.y;
            let g_phi = y * (2.0 * g_q);
            for k in 0..3 {
                g_r[k + 1] += g_phi[k];
            }
            let g_a = -(y * y.transpose()) * g_q;
            let mut block = g_sigma.fixed_view_mut::<3, 3>(1, 1);
            block += g_a;

            g_l = ((g_sigma + g_sigma.transpose()) * l).lower_triangle();
        }
    }
    for i in 0..4 {
        g_l[(i, i)] *= floor_diag(hg.cov.l_raw[(i, i)]).1;
    }
    grad.l_raw = g_l;
    grad.t = -g_r[0];
    if eval.mode == ConditioningMode::Full {
        let phi = r.fixed_rows::<3>(1).into_owned();
        let g_phi = g_r.fixed_rows::<3>(1).into_owned();
        grad.orientation = -(right_jacobian_inv(&phi).transpose() * g_phi);
    }
    grad
}
