//! Training loop: Adam steps over shuffled frame batches with periodic
//! pruning and densification.

use std::path::Path;

use nalgebra::Vector2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::field::OrientationField;
use crate::hyper::ConditioningMode;
use crate::io::SceneInputs;
use crate::metrics::{pck_t, psnr, ssim, EvalReport, FrameScore};
use crate::optim::adam::{Adam, Moments};
use crate::optim::config::FitConfig;
use crate::optim::densify::{prune_and_densify, DensifyConfig};
use crate::optim::grad::{grad_state, Objective};
use crate::optim::loss::LossBreakdown;
use crate::optim::params::*;
use crate::render::RenderOptions;
use crate::scene::Scene;
use crate::tracks::Track2d;

/// Optimizer state kept parallel to `scene.primitives`.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState {
    pub adam: Adam,
    pub moments: Vec<Moments>,
    /// Summed positional-gradient norms since the last densification.
    pub accum: Vec<f64>,
    pub counts: Vec<u32>,
    pub iteration: usize,
}

impl OptState {
    pub fn new(n: usize) -> Self {
        OptState {
            adam: Adam::default(),
            moments: (0..n).map(|_| Moments::new(NUM_PARAMS)).collect(),
            accum: vec![0.0; n],
            counts: vec![0; n],
            iteration: 0,
        }
    }

    pub fn retain(&mut self, keep: &[bool]) {
        let mut k = keep.iter();
        self.moments.retain(|_| *k.next().expect("one flag per primitive"));
        let mut k = keep.iter();
        self.accum.retain(|_| *k.next().expect("one flag per primitive"));
        let mut k = keep.iter();
        self.counts.retain(|_| *k.next().expect("one flag per primitive"));
    }

    pub fn push_primitive(&mut self) {
        self.moments.push(Moments::new(NUM_PARAMS));
        self.accum.push(0.0);
        self.counts.push(0);
    }

    pub fn clear_accumulators(&mut self) {
        self.accum.iter_mut().for_each(|a| *a = 0.0);
        self.counts.iter_mut().for_each(|c| *c = 0);
    }
}

/// Coordinates a conditioning variant never trains.
pub fn frozen_mask(mode: ConditioningMode) -> [bool; NUM_PARAMS] {
    let mut m = [false; NUM_PARAMS];
    match mode {
        ConditioningMode::Full => {}
        ConditioningMode::TimeOnly => {
            m[ORIENT..ORIENT + 3].iter_mut().for_each(|v| *v = true);
            // Everything in L except its (0, 0) entry.
            m[CHOL + 1..CROSS].iter_mut().for_each(|v| *v = true);
            for r in 0..9 {
                m[CROSS + 4 * r + 1..CROSS + 4 * r + 4].iter_mut().for_each(|v| *v = true);
            }
        }
        ConditioningMode::AnchorOnly => m[DP..NUM_PARAMS].iter_mut().for_each(|v| *v = true),
    }
    m
}

/// One Adam update of every primitive, followed by rebinding so the scene
/// stays a function of its primitives. `lr` holds per-coordinate step sizes.
pub fn step(scene: &mut Scene, state: &mut OptState, grads: &[ParamVec], lr: &ParamVec, frozen: &[bool; NUM_PARAMS]) -> Result<()> {
    if grads.len() != scene.primitives.len() || state.moments.len() != grads.len() {
        return Err(Error::Consistency(format!(
            "{} gradients, {} optimizer slots, {} primitives",
            grads.len(),
            state.moments.len(),
            scene.primitives.len()
        )));
    }
    let mut out = [0.0; NUM_PARAMS];
    for (i, g) in grads.iter().enumerate() {
        let mut g = *g;
        for k in 0..NUM_PARAMS {
            if frozen[k] {
                g[k] = 0.0;
            }
        }
        let norm = |o: usize| (g[o] * g[o] + g[o + 1] * g[o + 1] + g[o + 2] * g[o + 2]).sqrt();
        let pos = norm(MU) + norm(DP);
        if pos > 0.0 {
            state.accum[i] += pos;
            state.counts[i] += 1;
        }
        state.adam.step(&mut state.moments[i], &g, lr, &mut out);
        apply_step(&mut scene.primitives[i], &out);
        scene.rebind(i)?;
    }
    state.iteration += 1;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    pub loss: LossBreakdown,
    pub num_gaussians: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossTrace {
    pub rows: Vec<TraceRow>,
}

impl LossTrace {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iter,total,pho,cor,arap,num_gaussians\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{:.17e},{:.17e},{:.17e},{:.17e},{}\n",
                r.iter, r.loss.total, r.loss.photometric, r.loss.correspondence, r.loss.arap, r.num_gaussians
            ));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn totals(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.loss.total).collect()
    }
}

/// Builds the orientation field from the input trajectories and seeds one
/// primitive per track.
pub fn initialize_scene(inputs: &SceneInputs, config: &FitConfig) -> Result<Scene> {
    config.validate()?;
    inputs.validate(config.field.window)?;
    let field = OrientationField::build(&inputs.trajectories, config.field)?;
    let camera = inputs.cameras.first().ok_or_else(|| Error::DegenerateInput("no cameras".into()))?;
    let prims = Scene::seed_primitives(&inputs.trajectories, &field, &inputs.frames, camera, config.skin_k, &config.init)?;
    Scene::new(
        inputs.cameras.clone(),
        field,
        prims,
        RenderOptions::default(),
        config.variant,
        config.skin_k,
    )
}

pub fn objective(config: &FitConfig) -> Objective {
    Objective {
        weights: config.weights,
        correspondence: config.correspondence,
    }
}

/// Runs `config.iters` iterations on the training frames, in place. On
/// divergence the trace up to the failing iteration is kept.
pub fn fit(scene: &mut Scene, inputs: &SceneInputs, config: &FitConfig, trace: &mut LossTrace) -> Result<()> {
    config.validate()?;
    if inputs.frames.len() != scene.frames() {
        return Err(Error::Consistency(format!(
            "scene has {} frames, inputs have {}",
            scene.frames(),
            inputs.frames.len()
        )));
    }
    scene.mode = config.variant;
    let (train, _) = config.split_frames(scene.frames());
    if train.is_empty() {
        return Err(Error::Config("no training frames".into()));
    }
    let obj = objective(config);
    let frozen = frozen_mask(config.variant);
    let densify = DensifyConfig {
        prune_eps: config.prune_eps,
        densify_grad: config.densify_grad,
        max_primitives: config.max_primitives,
        ..DensifyConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = OptState::new(scene.primitives.len());
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    for iter in 0..config.iters {
        let mut batch = Vec::with_capacity(config.batch);
        while batch.len() < config.batch.min(train.len()) {
            if cursor == order.len() {
                order = train.clone();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let result = match grad_state(scene, inputs, &batch, &obj) {
            Ok(r) => r,
            Err(Error::NonFiniteGradient { .. }) => return Err(Error::Divergence { iteration: iter }),
            Err(e) => return Err(e),
        };
        trace.rows.push(TraceRow {
            iter,
            loss: result.loss,
            num_gaussians: scene.primitives.len(),
        });
        if !result.loss.total.is_finite() {
            return Err(Error::Divergence { iteration: iter });
        }
        let progress = iter as f64 / config.iters.max(1) as f64;
        let lr = config.lr.per_param(config.lr_decay.powf(progress));
        step(scene, &mut state, &result.grads, &lr, &frozen)?;

        let done = iter + 1;
        if done % config.densify_interval == 0 && done <= config.densify_until && done < config.iters {
            prune_and_densify(scene, &mut state, &densify, &mut rng)?;
        }
    }
    Ok(())
}

/// Projected centers of each track's birth primitive; frames where it is
/// missing, culled or behind the camera are invalid.
pub fn predicted_tracks(scene: &Scene, tracks: usize) -> Result<Vec<Track2d>> {
    let t = scene.frames();
    let mut pixels = vec![vec![Vector2::zeros(); t]; tracks];
    let mut depths = vec![vec![1.0; t]; tracks];
    let mut valid = vec![vec![false; t]; tracks];
    for frame in 0..t {
        let view = scene.view(frame)?;
        for (i, hg) in scene.primitives.iter().enumerate() {
            let Some(k) = hg.track.filter(|&k| k < tracks) else { continue };
            let Some(pv) = &view.views[i] else { continue };
            let (u, d) = view.camera.project(&pv.geometry.mu_p);
            if d > 0.0 && u.iter().all(|v| v.is_finite()) {
                pixels[k][frame] = u;
                depths[k][frame] = d;
                valid[k][frame] = true;
            }
        }
    }
    (0..tracks)
        .map(|k| Track2d::new(pixels[k].clone(), depths[k].clone(), valid[k].clone()))
        .collect()
}

/// PSNR and SSIM on `frames` and PCK-T of the birth-matched tracks.
pub fn evaluate_fit(scene: &Scene, inputs: &SceneInputs, frames: &[usize], pck_threshold: f64) -> Result<EvalReport> {
    let mut scores = Vec::with_capacity(frames.len());
    for &f in frames {
        let img = scene.render_frame(f)?;
        let target = inputs.frames.get(f)?;
        scores.push(FrameScore {
            frame: f,
            psnr: psnr(&img, target)?,
            ssim: ssim(&img, target)?,
        });
    }
    let pck = if inputs.observations.is_empty() {
        None
    } else {
        let pred = predicted_tracks(scene, inputs.observations.len())?;
        let (w, h) = inputs.frames.dims();
        let diag = ((w * w + h * h) as f64).sqrt();
        match pck_t(&pred, &inputs.observations, pck_threshold, diag) {
            Ok(v) => Some(v),
            Err(Error::DegenerateInput(_)) => None,
            Err(e) => return Err(e),
        }
    };
    Ok(EvalReport {
        frames: scores,
        pck_t: pck,
        seconds: 0.0,
        num_gaussians: Some(scene.primitives.len()),
    })
}

#[cfg(test)]
pub(crate) fn test_scene() -> (Scene, SceneInputs) {
    use crate::synthetic::{generate_synthetic_scene, MotionKind, SceneSpec};
    let spec = SceneSpec {
        frames: 8,
        tracks: 12,
        width: 32,
        height: 32,
        ..SceneSpec::new(MotionKind::RigidRotate)
    };
    let synth = generate_synthetic_scene(&spec).unwrap();
    let scene = initialize_scene(&synth.inputs, &FitConfig::default()).unwrap();
    (scene, synth.inputs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::grad::total_loss;

    #[test]
    fn zero_iterations_leave_scene_unchanged() {
        let (mut scene, inputs) = test_scene();
        let before = scene.primitives.clone();
        let cfg = FitConfig {
            iters: 0,
            ..FitConfig::default()
        };
        let mut trace = LossTrace::default();
        fit(&mut scene, &inputs, &cfg, &mut trace).unwrap();
        assert_eq!(scene.primitives, before);
        assert!(trace.rows.is_empty());
    }

    #[test]
    fn zero_gradient_step_only_enforces_invariants() {
        let (mut scene, _) = test_scene();
        scene.primitives[0].opacity = 1.5;
        let mut expected = scene.primitives.clone();
        expected.iter_mut().for_each(|p| p.enforce_invariants());
        let mut state = OptState::new(scene.primitives.len());
        let grads = vec![[0.0; NUM_PARAMS]; scene.primitives.len()];
        step(&mut scene, &mut state, &grads, &[1e-2; NUM_PARAMS], &[false; NUM_PARAMS]).unwrap();
        assert_eq!(scene.primitives, expected);
    }

    #[test]
    fn few_iterations_reduce_loss_and_are_deterministic() {
        let cfg = FitConfig {
            iters: 30,
            ..FitConfig::default()
        };
        let run = || {
            let (mut scene, inputs) = test_scene();
            let mut trace = LossTrace::default();
            fit(&mut scene, &inputs, &cfg, &mut trace).unwrap();
            (scene, inputs, trace)
        };
        let (a, inputs, ta) = run();
        let (b, _, tb) = run();
        assert_eq!(ta, tb);
        assert_eq!(a.primitives, b.primitives);
        let (init, _) = test_scene();
        let all: Vec<usize> = (0..inputs.frames.len()).collect();
        let obj = objective(&cfg);
        let before = total_loss(&init, &inputs, &all, &obj).unwrap().total;
        let after = total_loss(&a, &inputs, &all, &obj).unwrap().total;
        assert!(after < before, "{after} >= {before}");
    }

    #[test]
    fn step_keeps_invariants() {
        let (mut scene, _) = test_scene();
        let mut state = OptState::new(scene.primitives.len());
        let grads = vec![[5.0; NUM_PARAMS]; scene.primitives.len()];
        step(&mut scene, &mut state, &grads, &[10.0; NUM_PARAMS], &[false; NUM_PARAMS]).unwrap();
        for p in &scene.primitives {
            assert!(p.scale.iter().all(|s| *s >= crate::hyper::EPS_SCALE));
            assert!((0.0..=1.0).contains(&p.opacity));
            assert!((p.rotation.quaternion().norm() - 1.0).abs() < 1e-12);
            let l = p.cov.cholesky();
            assert!((0..4).all(|k| l[(k, k)] >= crate::hyper::EPS_DIAG));
        }
    }

    #[test]
    fn variants_freeze_their_blocks() {
        let m = frozen_mask(ConditioningMode::AnchorOnly);
        assert!(!m[MU] && m[DP] && m[CROSS + 35]);
        let m = frozen_mask(ConditioningMode::TimeOnly);
        assert!(!m[CHOL] && m[CHOL + 1] && !m[CROSS] && m[CROSS + 1] && !m[CROSS + 4] && m[ORIENT]);
        assert!(frozen_mask(ConditioningMode::Full).iter().all(|v| !v));
    }

    #[test]
    fn predicted_tracks_have_one_entry_per_track() {
        let (scene, inputs) = test_scene();
        let pred = predicted_tracks(&scene, inputs.observations.len()).unwrap();
        assert_eq!(pred.len(), inputs.observations.len());
        // Frame 0 positions are the seeds themselves.
        for (p, o) in pred.iter().zip(&inputs.observations) {
            if p.valid[0] && o.valid[0] {
                assert!((p.pixels[0] - o.pixels[0]).norm() < 1e-9);
            }
        }
    }
}
