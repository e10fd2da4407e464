//! Loss evaluation over a frame batch and analytic per-primitive gradients.
//!
//! Depth order, culling, the low-alpha skip and skinning weights are treated
//! as locally constant.

use nalgebra::{Matrix2, Vector2, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::hyper::{evaluate_backward, Vec9, EPS_SCALE};
use crate::io::SceneInputs;
use crate::math::right_jacobian;
use crate::optim::loss::{
    arap_loss, correspondence_loss, photometric_loss, photometric_loss_with_grad, CorrespondenceConfig, LossBreakdown,
    LossWeights,
};
use crate::optim::params::*;
use crate::render::{project_backward, render_backward};
use crate::scene::Scene;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Objective {
    pub weights: LossWeights,
    pub correspondence: CorrespondenceConfig,
}

#[derive(Clone, Debug)]
pub struct GradResult {
    pub loss: LossBreakdown,
    /// One gradient per primitive, in the [`crate::optim::params`] layout.
    pub grads: Vec<ParamVec>,
}

/// Upstream gradients of one primitive's modulated quantities at one view.
#[derive(Clone, Copy, Debug, Default)]
struct Upstream {
    center: Vector2<f64>,
    conic: Matrix2<f64>,
    opacity: f64,
    color: Vector3<f64>,
    mu: Vector3<f64>,
    touched: bool,
}

fn check_batch(scene: &Scene, batch: &[usize]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Config("frame batch is empty".into()));
    }
    for &f in batch {
        if f >= scene.frames() {
            return Err(Error::IndexOutOfRange {
                index: f,
                len: scene.frames(),
            });
        }
    }
    Ok(())
}

/// Loss of one frame and, optionally, its gradient (already scaled by `scale`).
fn frame_loss(
    scene: &Scene,
    inputs: &SceneInputs,
    frame: usize,
    obj: &Objective,
    grad_scale: Option<f64>,
) -> Result<(LossBreakdown, Option<Vec<ParamVec>>)> {
    let view = scene.view(frame)?;
    let w = &obj.weights;
    let mut out = LossBreakdown::default();
    let n = scene.primitives.len();
    let mut up = vec![Upstream::default(); if grad_scale.is_some() { n } else { 0 }];

    if w.photometric > 0.0 {
        let img = view.image(&scene.options);
        let target = inputs.frames.get(frame)?;
        match grad_scale {
            None => out.photometric = photometric_loss(&img, target)?,
            Some(s) => {
                let (l, mut g) = photometric_loss_with_grad(&img, target)?;
                out.photometric = l;
                let k = s * w.photometric;
                g.data_mut().iter_mut().for_each(|v| *v *= k);
                let sg = render_backward(&view.splats, view.camera.width, view.camera.height, &scene.options, &g)?;
                for (s, &owner) in sg.iter().zip(&view.owners) {
                    let u = &mut up[owner];
                    u.center += s.center;
                    u.conic += s.conic;
                    u.opacity += s.opacity;
                    u.color += s.color;
                    u.touched = true;
                }
            }
        }
    }
    if w.correspondence > 0.0 {
        let tracks: Vec<Option<usize>> = scene.primitives.iter().map(|p| p.track).collect();
        let term = correspondence_loss(&view, &tracks, &inputs.observations, frame, &obj.correspondence)?;
        out.correspondence = term.loss;
        if let Some(s) = grad_scale {
            for (i, g) in term.grads {
                up[i].mu += g * (s * w.correspondence);
                up[i].touched = true;
            }
        }
    }
    if w.arap > 0.0 {
        out.arap = arap_loss(&scene.field, view.t_prime)?;
    }
    out.total = w.photometric * out.photometric + w.correspondence * out.correspondence + w.arap * out.arap;

    let Some(_) = grad_scale else { return Ok((out, None)) };
    let grads: Vec<ParamVec> = (0..n)
        .into_par_iter()
        .map(|i| {
            let u = &up[i];
            let mut g = [0.0; NUM_PARAMS];
            let Some(pv) = (if u.touched { view.views[i].as_ref() } else { None }) else {
                return g;
            };
            let hg = &scene.primitives[i];
            let mut g_mu = u.mu;
            let mut g_s = Vector3::zeros();
            let mut g_r = Vector3::zeros();
            if let Some(proj) = &pv.projection {
                let pg = project_backward(proj, &view.camera, &u.center, &u.conic);
                g_mu += pg.mu;
                g_s = pg.scale;
                g_r = pg.rotation;
            }
            let off = pv.eval.offset;
            for k in 0..3 {
                if hg.scale[k] + off[3 + k] <= EPS_SCALE {
                    g_s[k] = 0.0;
                }
            }
            let q = pv.pose.transform.rotation.matrix();
            let omega = Vector3::new(off[6], off[7], off[8]);
            let g_omega = right_jacobian(&omega).transpose() * pv.geometry.rotation.matrix().transpose() * g_r;
            let mut g_offset = Vec9::zeros();
            g_offset.fixed_rows_mut::<3>(0).copy_from(&g_mu);
            g_offset.fixed_rows_mut::<3>(3).copy_from(&g_s);
            g_offset.fixed_rows_mut::<3>(6).copy_from(&g_omega);
            let sg = evaluate_backward(hg, &pv.eval, &g_offset, u.opacity);

            let g_mu_p = q.transpose() * g_mu;
            let g_rot = q.transpose() * g_r;
            for k in 0..3 {
                g[MU + k] = g_mu_p[k];
                g[SCALE + k] = g_s[k];
                g[ROT + k] = g_rot[k];
                g[COLOR + k] = u.color[k];
                g[ORIENT + k] = sg.orientation[k];
            }
            g[OPACITY] = sg.opacity;
            for k in 0..9 {
                g[DP + k] = sg.geometry[k];
            }
            g[TIME] = sg.t;
            let mut idx = 0;
            for r in 0..4 {
                for c in 0..=r {
                    g[CHOL + idx] = sg.l_raw[(r, c)];
                    idx += 1;
                }
            }
            for k in 0..36 {
                g[CROSS + k] = sg.cross[(k / 4, k % 4)];
            }
            g
        })
        .collect();
    Ok((out, Some(grads)))
}

fn accumulate(total: &mut LossBreakdown, l: &LossBreakdown, s: f64) {
    total.total += l.total * s;
    total.photometric += l.photometric * s;
    total.correspondence += l.correspondence * s;
    total.arap += l.arap * s;
}

/// Weighted loss averaged over the batch frames.
pub fn total_loss(scene: &Scene, inputs: &SceneInputs, batch: &[usize], obj: &Objective) -> Result<LossBreakdown> {
    check_batch(scene, batch)?;
    let s = 1.0 / batch.len() as f64;
    let mut out = LossBreakdown::default();
    for &f in batch {
        let (l, _) = frame_loss(scene, inputs, f, obj, None)?;
        accumulate(&mut out, &l, s);
    }
    Ok(out)
}

/// Loss and its gradient with respect to every primitive parameter.
pub fn grad_state(scene: &Scene, inputs: &SceneInputs, batch: &[usize], obj: &Objective) -> Result<GradResult> {
    check_batch(scene, batch)?;
    let s = 1.0 / batch.len() as f64;
    let mut loss = LossBreakdown::default();
    let mut grads = vec![[0.0; NUM_PARAMS]; scene.primitives.len()];
    for &f in batch {
        let (l, g) = frame_loss(scene, inputs, f, obj, Some(s))?;
        accumulate(&mut loss, &l, s);
        for (acc, g) in grads.iter_mut().zip(g.expect("gradient requested")) {
            for k in 0..NUM_PARAMS {
                acc[k] += g[k];
            }
        }
    }
    let bad: Vec<u64> = grads
        .iter()
        .zip(&scene.primitives)
        .filter(|(g, _)| g.iter().any(|v| !v.is_finite()))
        .map(|(_, p)| p.id)
        .collect();
    if !bad.is_empty() {
        return Err(Error::NonFiniteGradient { ids: bad });
    }
    Ok(GradResult { loss, grads })
}

/// Relative error used by gradient checks.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Central finite difference of [`total_loss`] along coordinate `k` of primitive `i`.
pub fn finite_difference(
    scene: &Scene,
    inputs: &SceneInputs,
    batch: &[usize],
    obj: &Objective,
    i: usize,
    k: usize,
    h: f64,
) -> Result<f64> {
    let mut plus = scene.clone();
    perturb(&mut plus.primitives[i], k, h);
    let mut minus = scene.clone();
    perturb(&mut minus.primitives[i], k, -h);
    let fp = total_loss(&plus, inputs, batch, obj)?.total;
    let fm = total_loss(&minus, inputs, batch, obj)?.total;
    Ok((fp - fm) / (2.0 * h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::fit::test_scene;
    use crate::render::RenderOptions;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn busy_scene(seed: u64) -> (Scene, SceneInputs) {
        let (mut scene, inputs) = test_scene();
        scene.options = RenderOptions::exhaustive();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in scene.primitives.iter_mut() {
            for k in 0..36 {
                p.cov.cross[(k / 4, k % 4)] = rng.random_range(-0.05..0.05);
            }
            p.state.t = rng.random_range(0.3..0.7);
            p.opacity = rng.random_range(0.3..0.8);
            for k in 0..3 {
                p.state.dp[k] = rng.random_range(-0.05..0.05);
            }
        }
        (scene, inputs)
    }

    fn check(weights: LossWeights, seed: u64) -> (usize, usize, f64) {
        let (scene, inputs) = busy_scene(seed);
        let obj = Objective {
            weights,
            ..Objective::default()
        };
        let batch = [1, 5];
        let g = grad_state(&scene, &inputs, &batch, &obj).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let (mut good, mut total, mut worst) = (0, 0, 0.0f64);
        for _ in 0..120 {
            let i = rng.random_range(0..scene.primitives.len());
            let k = rng.random_range(0..NUM_PARAMS);
            let fd = finite_difference(&scene, &inputs, &batch, &obj, i, k, 1e-4).unwrap();
            let e = relative_error(g.grads[i][k], fd);
            total += 1;
            if e < 1e-3 {
                good += 1;
            }
            worst = worst.max(e);
        }
        (good, total, worst)
    }

    #[test]
    fn photometric_gradient_matches_finite_differences() {
        let w = LossWeights {
            photometric: 1.0,
            correspondence: 0.0,
            arap: 0.0,
        };
        let (good, total, worst) = check(w, 3);
        assert!(good * 100 >= 95 * total, "{good}/{total}, worst {worst}");
        assert!(worst < 1e-2, "worst {worst}");
    }

    #[test]
    fn correspondence_gradient_matches_finite_differences() {
        let w = LossWeights {
            photometric: 0.0,
            correspondence: 1.0,
            arap: 0.0,
        };
        let (good, total, worst) = check(w, 4);
        assert!(good * 100 >= 95 * total, "{good}/{total}, worst {worst}");
        assert!(worst < 1e-2, "worst {worst}");
    }

    #[test]
    fn zero_weights_give_zero_gradients() {
        let (scene, inputs) = busy_scene(5);
        let obj = Objective {
            weights: LossWeights {
                photometric: 0.0,
                correspondence: 0.0,
                arap: 0.0,
            },
            ..Objective::default()
        };
        let g = grad_state(&scene, &inputs, &[0, 3], &obj).unwrap();
        assert!(g.grads.iter().all(|g| g.iter().all(|v| *v == 0.0)));
        assert_eq!(g.loss.total, 0.0);
    }
}
