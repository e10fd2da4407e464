//! Photometric, correspondence and ARAP loss terms.

use std::collections::BTreeSet;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::field::OrientationField;
use crate::image::Image;
use crate::metrics::ssim_with_grad;
use crate::scene::SceneView;
use crate::tracks::Track2d;

pub const L1_WEIGHT: f64 = 0.8;
pub const DSSIM_WEIGHT: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub photometric: f64,
    pub correspondence: f64,
    pub arap: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            photometric: 1.0,
            correspondence: 0.5,
            arap: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.photometric, self.correspondence, self.arap];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be nonnegative, got {all:?}")));
        }
        if all.iter().all(|w| *w == 0.0) {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorrespondenceConfig {
    /// Huber transition, in pixels.
    pub delta: f64,
    /// Weight of the absolute depth error.
    pub depth_weight: f64,
}

impl Default for CorrespondenceConfig {
    fn default() -> Self {
        CorrespondenceConfig {
            delta: 2.0,
            depth_weight: 0.1,
        }
    }
}

/// Loss values of one evaluation (averaged over the batch when aggregated).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub photometric: f64,
    pub correspondence: f64,
    pub arap: f64,
}

fn l1_with_grad(rendered: &Image, target: &Image, grad: Option<&mut Image>) -> f64 {
    let n = rendered.data().len() as f64;
    let mut sum = 0.0;
    let r = rendered.data();
    let t = target.data();
    for i in 0..r.len() {
        sum += (r[i] - t[i]).abs();
    }
    if let Some(g) = grad {
        for (gi, (a, b)) in g.data_mut().iter_mut().zip(r.iter().zip(t)) {
            let d = a - b;
            *gi += if d > 0.0 {
                L1_WEIGHT / n
            } else if d < 0.0 {
                -L1_WEIGHT / n
            } else {
                0.0
            };
        }
    }
    sum / n
}

/// `0.8 * L1 + 0.2 * (1 - SSIM)` over RGB.
pub fn photometric_loss(rendered: &Image, target: &Image) -> Result<f64> {
    rendered.ensure_same_size(target)?;
    let l1 = l1_with_grad(rendered, target, None);
    let (s, _) = ssim_with_grad(rendered, target, false)?;
    Ok(L1_WEIGHT * l1 + DSSIM_WEIGHT * (1.0 - s))
}

/// Photometric loss and its gradient with respect to the rendered image.
pub fn photometric_loss_with_grad(rendered: &Image, target: &Image) -> Result<(f64, Image)> {
    rendered.ensure_same_size(target)?;
    let (s, g_ssim) = ssim_with_grad(rendered, target, true)?;
    let mut grad = g_ssim.expect("requested");
    for v in grad.data_mut() {
        *v *= -DSSIM_WEIGHT;
    }
    let l1 = l1_with_grad(rendered, target, Some(&mut grad));
    Ok((L1_WEIGHT * l1 + DSSIM_WEIGHT * (1.0 - s), grad))
}

/// Huber penalty of a nonnegative error `e`.
pub fn huber(e: f64, delta: f64) -> f64 {
    if e <= delta {
        0.5 * e * e
    } else {
        delta * (e - 0.5 * delta)
    }
}

/// Correspondence loss at one frame; `count` is the number of observations used.
/// A count of zero means no valid track was visible (the loss is then 0).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CorrespondenceTerm {
    pub loss: f64,
    pub count: usize,
    /// Gradient with respect to each matched primitive's modulated center.
    pub grads: Vec<(usize, Vector3<f64>)>,
}

/// Mean over primitives with a birth track valid at `frame` of
/// `Huber(|pi(center) - u|) + lambda_d |z - d|`.
pub fn correspondence_loss(
    view: &SceneView,
    track_of: &[Option<usize>],
    observations: &[Track2d],
    frame: usize,
    cfg: &CorrespondenceConfig,
) -> Result<CorrespondenceTerm> {
    let cam = &view.camera;
    let w_rot = cam.pose.rotation.inverse().matrix();
    let mut term = CorrespondenceTerm::default();
    let mut sum = 0.0;
    for (i, track) in track_of.iter().enumerate() {
        let Some(k) = *track else { continue };
        let obs = observations.get(k).ok_or(Error::IndexOutOfRange {
            index: k,
            len: observations.len(),
        })?;
        if frame >= obs.len() || !obs.valid[frame] {
            continue;
        }
        let Some(pv) = &view.views[i] else { continue };
        let p_cam = cam.world_to_camera(&pv.geometry.mu_p);
        if p_cam.z <= 0.0 {
            continue;
        }
        let u = cam.intrinsics.project(&p_cam);
        let r = u - obs.pixels[frame];
        let e = r.norm();
        let dz = p_cam.z - obs.depths[frame];
        sum += huber(e, cfg.delta) + cfg.depth_weight * dz.abs();
        let g_u = if e <= cfg.delta { r } else { r * (cfg.delta / e) };
        let mut g_p = cam.intrinsics.jacobian(&p_cam).transpose() * g_u;
        g_p.z += cfg.depth_weight * dz.signum() * (dz != 0.0) as u8 as f64;
        term.grads.push((i, w_rot.transpose() * g_p));
        term.count += 1;
    }
    if term.count > 0 {
        let inv = 1.0 / term.count as f64;
        term.loss = sum * inv;
        for (_, g) in term.grads.iter_mut() {
            *g *= inv;
        }
    }
    Ok(term)
}

/// Undirected anchor edges `(i, j)`, `i < j`, from the frame-0 neighborhoods.
pub fn arap_edges(field: &OrientationField) -> Vec<(usize, usize)> {
    let mut edges = BTreeSet::new();
    for i in 0..field.len() {
        for &j in field.neighborhood(i) {
            if i != j {
                edges.insert((i.min(j), i.max(j)));
            }
        }
    }
    edges.into_iter().collect()
}

fn anchor_positions_at(field: &OrientationField, t_prime: f64) -> Result<Vec<Vector3<f64>>> {
    (0..field.len())
        .map(|i| field.anchor_pose_at(i, t_prime).map(|p| p.translation))
        .collect()
}

/// Mean squared change of anchor edge lengths between frame 0 and `t_prime`.
pub fn arap_loss(field: &OrientationField, t_prime: f64) -> Result<f64> {
    let edges = arap_edges(field);
    let pos = anchor_positions_at(field, t_prime)?;
    arap_loss_for_positions(field, &edges, &pos)
}

pub fn arap_loss_for_positions(field: &OrientationField, edges: &[(usize, usize)], pos: &[Vector3<f64>]) -> Result<f64> {
    if edges.is_empty() {
        return Ok(0.0);
    }
    let rest = field.rest_positions();
    let sum: f64 = edges
        .iter()
        .map(|&(i, j)| {
            let d = (pos[i] - pos[j]).norm() - (rest[i] - rest[j]).norm();
            d * d
        })
        .sum();
    Ok(sum / edges.len() as f64)
}

/// Gradient of [`arap_loss`] with respect to the anchor positions at `t_prime`.
pub fn arap_position_grad(field: &OrientationField, t_prime: f64) -> Result<Vec<Vector3<f64>>> {
    let edges = arap_edges(field);
    let pos = anchor_positions_at(field, t_prime)?;
    let rest = field.rest_positions();
    let mut g = vec![Vector3::zeros(); pos.len()];
    if edges.is_empty() {
        return Ok(g);
    }
    let inv = 1.0 / edges.len() as f64;
    for &(i, j) in &edges {
        let v = pos[i] - pos[j];
        let len = v.norm();
        if len == 0.0 {
            continue;
        }
        let d = len - (rest[i] - rest[j]).norm();
        let gv = v * (2.0 * d / len * inv);
        g[i] += gv;
        g[j] -= gv;
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::FieldConfig;
    use crate::math::Rotation;
    use crate::metrics::ssim;
    use crate::tracks::Trajectory;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut impl Rng, w: usize, h: usize) -> Image {
        Image::from_data(w, h, (0..w * h * 3).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn photometric_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_image(&mut rng, 16, 16);
        assert_abs_diff_eq!(photometric_loss(&a, &a).unwrap(), 0.0, epsilon = 1e-12);
        let zero = Image::new(16, 16);
        let one = Image::filled(16, 16, [1.0; 3]);
        assert_eq!(l1_with_grad(&one, &zero, None), 1.0);
        let b = random_image(&mut rng, 16, 16);
        let l1: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / (16.0 * 16.0 * 3.0);
        let expected = 0.8 * l1 + 0.2 * (1.0 - ssim(&a, &b).unwrap());
        assert_abs_diff_eq!(photometric_loss(&a, &b).unwrap(), expected, epsilon = 1e-10);
        assert!(photometric_loss(&a, &Image::new(16, 15)).is_err());
    }

    #[test]
    fn photometric_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_image(&mut rng, 13, 12);
        let b = random_image(&mut rng, 13, 12);
        let (_, g) = photometric_loss_with_grad(&a, &b).unwrap();
        let h = 1e-7;
        for _ in 0..30 {
            let k = rng.random_range(0..a.data().len());
            let mut p = a.clone();
            p.data_mut()[k] += h;
            let mut m = a.clone();
            m.data_mut()[k] -= h;
            let fd = (photometric_loss(&p, &b).unwrap() - photometric_loss(&m, &b).unwrap()) / (2.0 * h);
            assert_abs_diff_eq!(fd, g.data()[k], epsilon = 1e-7);
        }
    }

    #[test]
    fn huber_branches() {
        assert_eq!(huber(1.0, 2.0), 0.5);
        assert_eq!(huber(2.0, 2.0), 2.0);
        assert_eq!(huber(3.0, 2.0), 4.0);
    }

    fn grid_field(frames: Vec<Box<dyn Fn(Vector3<f64>) -> Vector3<f64>>>) -> OrientationField {
        let mut trajs = Vec::new();
        for i in 0..4 {
            for j in 0..3 {
                let p = Vector3::new(i as f64 * 0.5, j as f64 * 0.7, 0.1 * (i * j) as f64);
                trajs.push(Trajectory::from_positions(frames.iter().map(|f| f(p)).collect()));
            }
        }
        OrientationField::build(&trajs, FieldConfig { k: 4, window: 3 }).unwrap()
    }

    #[test]
    fn arap_of_rigid_motion_is_zero() {
        let motions: Vec<Box<dyn Fn(Vector3<f64>) -> Vector3<f64>>> = (0..4)
            .map(|t| {
                let r = Rotation::from_axis_angle(&Vector3::new(0.3, 1.0, 0.2), 0.2 * t as f64);
                Box::new(move |p: Vector3<f64>| r.rotate(&p) + Vector3::new(0.1 * t as f64, 0.0, 0.0)) as Box<dyn Fn(_) -> _>
            })
            .collect();
        let field = grid_field(motions);
        for t in [0.0, 1.0 / 3.0, 1.0] {
            assert!(arap_loss(&field, t).unwrap() < 1e-12);
        }
    }

    #[test]
    fn arap_of_uniform_scale_is_mean_squared_length() {
        let motions: Vec<Box<dyn Fn(Vector3<f64>) -> Vector3<f64>>> = vec![
            Box::new(|p| p),
            Box::new(|p| p * 1.5),
            Box::new(|p| p * 2.0),
        ];
        let field = grid_field(motions);
        let edges = arap_edges(&field);
        let rest = field.rest_positions();
        let expected = edges.iter().map(|&(i, j)| (rest[i] - rest[j]).norm_squared()).sum::<f64>() / edges.len() as f64;
        assert_abs_diff_eq!(arap_loss(&field, 1.0).unwrap(), expected, epsilon = 1e-12);
    }

    #[test]
    fn arap_position_gradient_matches_finite_differences() {
        let motions: Vec<Box<dyn Fn(Vector3<f64>) -> Vector3<f64>>> = vec![
            Box::new(|p| p),
            Box::new(|p| Vector3::new(p.x * 1.1, p.y + 0.2 * p.x * p.x, p.z)),
            Box::new(|p| Vector3::new(p.x * 1.3, p.y - 0.1 * p.x, p.z * 0.9)),
        ];
        let field = grid_field(motions);
        let edges = arap_edges(&field);
        let pos: Vec<Vector3<f64>> = (0..field.len()).map(|i| field.anchor_pose_at(i, 1.0).unwrap().translation).collect();
        let g = arap_position_grad(&field, 1.0).unwrap();
        let h = 1e-6;
        for i in 0..pos.len() {
            for k in 0..3 {
                let mut p = pos.clone();
                p[i][k] += h;
                let mut m = pos.clone();
                m[i][k] -= h;
                let fd = (arap_loss_for_positions(&field, &edges, &p).unwrap() - arap_loss_for_positions(&field, &edges, &m).unwrap()) / (2.0 * h);
                assert_abs_diff_eq!(fd, g[i][k], epsilon = 1e-8);
            }
        }
    }
}
