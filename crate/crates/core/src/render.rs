//! CPU splatting: EWA projection of 3D Gaussians and exact front-to-back
//! alpha compositing with a global depth sort.

use std::cmp::Ordering;

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::math::rotation::skew_trace_grad;
use crate::math::Rotation;

pub const NEAR_PLANE: f64 = 0.01;
/// Added to the projected covariance diagonal, in pixels squared.
pub const SCREEN_BLUR: f64 = 0.3;
pub const ALPHA_MAX: f64 = 0.99;
pub const ALPHA_MIN: f64 = 1.0 / 255.0;
pub const MIN_TRANSMITTANCE: f64 = 1e-4;
pub const CULL_SIGMA: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderOptions {
    pub background: [f64; 3],
    /// Skip contributions with alpha below [`ALPHA_MIN`].
    pub skip_low_alpha: bool,
    /// Stop compositing a pixel once transmittance drops below [`MIN_TRANSMITTANCE`].
    pub early_out: bool,
    pub alpha_max: f64,
    pub cull_sigma: f64,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions {
            background: [0.0; 3],
            skip_low_alpha: true,
            early_out: true,
            alpha_max: ALPHA_MAX,
            cull_sigma: CULL_SIGMA,
        }
    }
}

impl RenderOptions {
    /// Every splat touches every pixel and compositing never stops early.
    pub fn exhaustive() -> Self {
        RenderOptions {
            skip_low_alpha: false,
            early_out: false,
            ..Self::default()
        }
    }
}

/// Image-space footprint of one primitive.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Splat2D {
    pub id: u64,
    pub center: Vector2<f64>,
    /// Inverse of the 2D covariance.
    pub conic: Matrix2<f64>,
    pub depth: f64,
    pub opacity: f64,
    pub color: Vector3<f64>,
}

/// Intermediate values of [`project_gaussian`], kept for the backward pass.
#[derive(Clone, Copy, Debug)]
pub struct Projection {
    pub center: Vector2<f64>,
    pub depth: f64,
    pub cov2d: Matrix2<f64>,
    pub conic: Matrix2<f64>,
    p_cam: Vector3<f64>,
    jacobian: Matrix2x3<f64>,
    world_to_cam: Matrix3<f64>,
    cov_world: Matrix3<f64>,
    cov_cam: Matrix3<f64>,
    rotation: Matrix3<f64>,
    scale: Vector3<f64>,
}

/// Projects `N(mu, R S S^T R^T)` through the local affine approximation of the
/// pinhole map. Returns `None` when culled.
pub fn project_gaussian(
    mu: &Vector3<f64>,
    scale: &Vector3<f64>,
    rotation: &Rotation,
    camera: &Camera,
    cull_sigma: f64,
) -> Option<Projection> {
    let w = camera.pose.rotation.inverse().matrix();
    let p_cam = w * (mu - camera.pose.translation);
    if p_cam.z <= NEAR_PLANE {
        return None;
    }
    let r = rotation.matrix();
    let s2 = Matrix3::from_diagonal(&scale.component_mul(scale));
    let cov_world = r * s2 * r.transpose();
    let cov_cam = w * cov_world * w.transpose();
    let j = camera.intrinsics.jacobian(&p_cam);
    let mut cov2d = j * cov_cam * j.transpose();
    cov2d = (cov2d + cov2d.transpose()) * 0.5;
    cov2d[(0, 0)] += SCREEN_BLUR;
    cov2d[(1, 1)] += SCREEN_BLUR;
    let det = cov2d.determinant();
    if !(det > 0.0 && det.is_finite()) {
        return None;
    }
    let conic = Matrix2::new(cov2d[(1, 1)], -cov2d[(0, 1)], -cov2d[(1, 0)], cov2d[(0, 0)]) / det;
    let center = camera.intrinsics.project(&p_cam);

    let ex = cull_sigma * cov2d[(0, 0)].sqrt();
    let ey = cull_sigma * cov2d[(1, 1)].sqrt();
    let (lo_x, hi_x) = (-0.5, camera.width as f64 - 0.5);
    let (lo_y, hi_y) = (-0.5, camera.height as f64 - 0.5);
    if center.x + ex < lo_x || center.x - ex > hi_x || center.y + ey < lo_y || center.y - ey > hi_y {
        return None;
    }
    Some(Projection {
        center,
        depth: p_cam.z,
        cov2d,
        conic,
        p_cam,
        jacobian: j,
        world_to_cam: w,
        cov_world,
        cov_cam,
        rotation: r,
        scale: *scale,
    })
}

impl Splat2D {
    pub fn new(id: u64, projection: &Projection, opacity: f64, color: Vector3<f64>) -> Self {
        Splat2D {
            id,
            center: projection.center,
            conic: projection.conic,
            depth: projection.depth,
            opacity,
            color,
        }
    }

    /// `exp(-1/2 d^T conic d)` at pixel `(x, y)`.
    #[inline]
    pub fn falloff(&self, x: f64, y: f64) -> f64 {
        self.power(x - self.center.x, y - self.center.y).exp()
    }

    #[inline]
    fn power(&self, dx: f64, dy: f64) -> f64 {
        let a = self.conic[(0, 0)];
        let b = self.conic[(0, 1)];
        let c = self.conic[(1, 1)];
        -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy
    }
}

/// Total order on splats: depth, then id.
pub fn depth_order(a: &Splat2D, b: &Splat2D) -> Ordering {
    a.depth.total_cmp(&b.depth).then(a.id.cmp(&b.id))
}

/// Pixel-aligned bounding box `[x0, x1] x [y0, y1]` outside which a splat's
/// alpha is below the skip threshold.
#[derive(Clone, Copy, Debug)]
struct Footprint {
    x0: i64,
    x1: i64,
    y0: i64,
    y1: i64,
}

fn footprint(s: &Splat2D, width: usize, height: usize, options: &RenderOptions) -> Option<Footprint> {
    let full = Footprint {
        x0: 0,
        x1: width as i64 - 1,
        y0: 0,
        y1: height as i64 - 1,
    };
    if !options.skip_low_alpha {
        return Some(full);
    }
    if !(s.opacity >= ALPHA_MIN) {
        return None;
    }
    // Region where opacity * G >= 1/255 is d^T conic d <= 2 ln(255 opacity).
    let level = 2.0 * (s.opacity / ALPHA_MIN).ln().max(0.0);
    let det = s.conic.determinant();
    if !(det > 0.0) {
        return Some(full);
    }
    let cov_xx = s.conic[(1, 1)] / det;
    let cov_yy = s.conic[(0, 0)] / det;
    let ex = (level * cov_xx).sqrt() + 1.0;
    let ey = (level * cov_yy).sqrt() + 1.0;
    let fp = Footprint {
        x0: ((s.center.x - ex).floor() as i64).max(0),
        x1: ((s.center.x + ex).ceil() as i64).min(width as i64 - 1),
        y0: ((s.center.y - ey).floor() as i64).max(0),
        y1: ((s.center.y + ey).ceil() as i64).min(height as i64 - 1),
    };
    if fp.x0 > fp.x1 || fp.y0 > fp.y1 {
        None
    } else {
        Some(fp)
    }
}

/// One composited contribution at a pixel.
#[derive(Clone, Copy, Debug)]
struct Contribution {
    splat: usize,
    alpha: f64,
    falloff: f64,
    transmittance: f64,
    clamped: bool,
}

struct Prepared {
    order: Vec<usize>,
    footprints: Vec<Option<Footprint>>,
}

fn prepare(splats: &[Splat2D], width: usize, height: usize, options: &RenderOptions) -> Prepared {
    let mut order: Vec<usize> = (0..splats.len()).collect();
    order.sort_by(|&a, &b| depth_order(&splats[a], &splats[b]));
    let footprints = splats.iter().map(|s| footprint(s, width, height, options)).collect();
    Prepared { order, footprints }
}

fn row_candidates(prep: &Prepared, y: usize) -> Vec<(usize, Footprint)> {
    prep.order
        .iter()
        .filter_map(|&i| prep.footprints[i].map(|f| (i, f)))
        .filter(|(_, f)| f.y0 <= y as i64 && y as i64 <= f.y1)
        .collect()
}

/// Composites one pixel, calling `visit` for every contribution in front-to-back order.
/// Returns the color and the final transmittance.
#[inline]
fn composite_pixel(
    splats: &[Splat2D],
    candidates: &[(usize, Footprint)],
    x: usize,
    y: usize,
    options: &RenderOptions,
    mut visit: impl FnMut(Contribution),
) -> ([f64; 3], f64) {
    let (xf, yf) = (x as f64, y as f64);
    let mut t = 1.0;
    let mut c = [0.0; 3];
    for &(i, fp) in candidates {
        if (x as i64) < fp.x0 || (x as i64) > fp.x1 {
            continue;
        }
        let s = &splats[i];
        let g = s.falloff(xf, yf);
        let raw = s.opacity * g;
        let clamped = raw > options.alpha_max;
        let alpha = if clamped { options.alpha_max } else { raw };
        if options.skip_low_alpha && alpha < ALPHA_MIN {
            continue;
        }
        for k in 0..3 {
            c[k] += s.color[k] * alpha * t;
        }
        visit(Contribution {
            splat: i,
            alpha,
            falloff: g,
            transmittance: t,
            clamped,
        });
        t *= 1.0 - alpha;
        if options.early_out && t < MIN_TRANSMITTANCE {
            break;
        }
    }
    for k in 0..3 {
        c[k] += options.background[k] * t;
    }
    (c, t)
}

pub fn render(splats: &[Splat2D], width: usize, height: usize, options: &RenderOptions) -> Image {
    let prep = prepare(splats, width, height, options);
    let rows: Vec<Vec<f64>> = (0..height)
        .into_par_iter()
        .map(|y| {
            let cand = row_candidates(&prep, y);
            let mut row = Vec::with_capacity(width * 3);
            for x in 0..width {
                let (c, _) = composite_pixel(splats, &cand, x, y, options, |_| {});
                row.extend_from_slice(&c);
            }
            row
        })
        .collect();
    Image::from_data(width, height, rows.concat()).expect("rows fill the image")
}

/// Per-pixel transmittance after compositing (for inspection and tests).
pub fn transmittance_trace(splats: &[Splat2D], width: usize, height: usize, x: usize, y: usize, options: &RenderOptions) -> Vec<f64> {
    let prep = prepare(splats, width, height, options);
    let cand = row_candidates(&prep, y);
    let mut trace = vec![1.0];
    composite_pixel(splats, &cand, x, y, options, |c| trace.push(c.transmittance * (1.0 - c.alpha)));
    trace
}

/// Gradient of a scalar loss with respect to one splat's image-space parameters.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SplatGrad {
    pub center: Vector2<f64>,
    /// Symmetric-matrix gradient of the conic (off-diagonal entries each carry half).
    pub conic: Matrix2<f64>,
    pub opacity: f64,
    pub color: Vector3<f64>,
}

impl SplatGrad {
    fn add(&mut self, o: &SplatGrad) {
        self.center += o.center;
        self.conic += o.conic;
        self.opacity += o.opacity;
        self.color += o.color;
    }
}

/// Back-propagates `d_image` (dL/d pixel values) to the splats.
/// Depth order, culling and the skip test are treated as constants.
pub fn render_backward(
    splats: &[Splat2D],
    width: usize,
    height: usize,
    options: &RenderOptions,
    d_image: &Image,
) -> Result<Vec<SplatGrad>> {
    if d_image.dims() != (width, height) {
        return Err(Error::SizeMismatch {
            left: d_image.dims(),
            right: (width, height),
        });
    }
    let prep = prepare(splats, width, height, options);
    let per_row: Vec<Vec<(usize, SplatGrad)>> = (0..height)
        .into_par_iter()
        .map(|y| {
            let cand = row_candidates(&prep, y);
            let mut slot = vec![usize::MAX; splats.len()];
            let mut local: Vec<(usize, SplatGrad)> = Vec::new();
            let mut contribs = Vec::new();
            for x in 0..width {
                contribs.clear();
                let (_, t_final) = composite_pixel(splats, &cand, x, y, options, |c| contribs.push(c));
                let g = d_image.pixel(x, y);
                let g = Vector3::new(g[0], g[1], g[2]);
                if g == Vector3::zeros() {
                    continue;
                }
                let bg = Vector3::new(options.background[0], options.background[1], options.background[2]);
                let mut suffix = bg * t_final;
                for c in contribs.iter().rev() {
                    let s = &splats[c.splat];
                    let mut sg = SplatGrad {
                        color: g * (c.alpha * c.transmittance),
                        ..SplatGrad::default()
                    };
                    let d_alpha = g.dot(&(s.color * c.transmittance - suffix / (1.0 - c.alpha)));
                    suffix += s.color * (c.alpha * c.transmittance);
                    if !c.clamped {
                        sg.opacity = d_alpha * c.falloff;
                        let d_power = d_alpha * s.opacity * c.falloff;
                        let dx = x as f64 - s.center.x;
                        let dy = y as f64 - s.center.y;
                        let a = s.conic[(0, 0)];
                        let b = s.conic[(0, 1)];
                        let cc = s.conic[(1, 1)];
                        sg.conic = Matrix2::new(-0.5 * dx * dx, -0.5 * dx * dy, -0.5 * dx * dy, -0.5 * dy * dy) * d_power;
                        sg.center = Vector2::new(a * dx + b * dy, b * dx + cc * dy) * d_power;
                    }
                    if slot[c.splat] == usize::MAX {
                        slot[c.splat] = local.len();
                        local.push((c.splat, sg));
                    } else {
                        local[slot[c.splat]].1.add(&sg);
                    }
                }
            }
            local
        })
        .collect();

    let mut grads = vec![SplatGrad::default(); splats.len()];
    for row in per_row {
        for (i, g) in row {
            grads[i].add(&g);
        }
    }
    Ok(grads)
}

/// Gradients of a projection's inputs.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ProjectionGrad {
    pub mu: Vector3<f64>,
    pub scale: Vector3<f64>,
    /// Left-perturbation gradient of the rotation.
    pub rotation: Vector3<f64>,
}

/// Chains image-space center/conic gradients back through [`project_gaussian`].
pub fn project_backward(proj: &Projection, camera: &Camera, d_center: &Vector2<f64>, d_conic: &Matrix2<f64>) -> ProjectionGrad {
    let k = proj.conic;
    let g_cov2d = -(k * d_conic * k);
    let g_cov2d = (g_cov2d + g_cov2d.transpose()) * 0.5;
    let j = proj.jacobian;
    let g_cov_cam = j.transpose() * g_cov2d * j;
    let g_j = g_cov2d * j * proj.cov_cam * 2.0;

    let fx = camera.intrinsics.fx;
    let fy = camera.intrinsics.fy;
    let p = proj.p_cam;
    let iz = 1.0 / p.z;
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;
    let mut g_p = j.transpose() * d_center;
    g_p.x += g_j[(0, 2)] * (-fx * iz2);
    g_p.y += g_j[(1, 2)] * (-fy * iz2);
    g_p.z += g_j[(0, 0)] * (-fx * iz2)
        + g_j[(0, 2)] * (2.0 * fx * p.x * iz3)
        + g_j[(1, 1)] * (-fy * iz2)
        + g_j[(1, 2)] * (2.0 * fy * p.y * iz3);

    let w = proj.world_to_cam;
    let g_cov = w.transpose() * g_cov_cam * w;
    let r = proj.rotation;
    let local = r.transpose() * g_cov * r;
    let scale = Vector3::new(
        2.0 * proj.scale.x * local[(0, 0)],
        2.0 * proj.scale.y * local[(1, 1)],
        2.0 * proj.scale.z * local[(2, 2)],
    );
    let sigma = proj.cov_world;
    ProjectionGrad {
        mu: w.transpose() * g_p,
        scale,
        rotation: skew_trace_grad(&(sigma * g_cov - g_cov * sigma)),
    }
}
