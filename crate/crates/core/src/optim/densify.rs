//! Opacity pruning and gradient-driven duplication.

use nalgebra::Vector3;
use rand::Rng;

use crate::error::Result;
use crate::optim::fit::OptState;
use crate::scene::Scene;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DensifyConfig {
    pub prune_eps: f64,
    pub densify_grad: f64,
    pub max_primitives: usize,
    /// Jitter radius as a fraction of the parent's mean scale.
    pub jitter: f64,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        DensifyConfig {
            prune_eps: 0.005,
            densify_grad: 2e-4,
            max_primitives: 200,
            jitter: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DensifyReport {
    pub pruned: usize,
    pub duplicated: usize,
}

fn random_in_ball(rng: &mut impl Rng, radius: f64) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        if v.norm_squared() <= 1.0 {
            return v * radius;
        }
    }
}

/// Removes faint primitives, duplicates those with a large mean positional
/// gradient, and clears every accumulator.
pub fn prune_and_densify(
    scene: &mut Scene,
    state: &mut OptState,
    cfg: &DensifyConfig,
    rng: &mut impl Rng,
) -> Result<DensifyReport> {
    let mut report = DensifyReport::default();
    let n = scene.primitives.len();
    let mean_grad: Vec<f64> = (0..n)
        .map(|i| {
            if state.counts[i] == 0 {
                0.0
            } else {
                state.accum[i] / state.counts[i] as f64
            }
        })
        .collect();

    let keep: Vec<bool> = scene.primitives.iter().map(|p| p.opacity >= cfg.prune_eps).collect();
    report.pruned = keep.iter().filter(|k| !**k).count();

    let mut candidates: Vec<usize> = (0..n)
        .filter(|&i| keep[i] && mean_grad[i] > cfg.densify_grad)
        .collect();
    // Largest gradients first; ties by index.
    candidates.sort_by(|&a, &b| mean_grad[b].total_cmp(&mean_grad[a]).then(a.cmp(&b)));
    let room = cfg.max_primitives.saturating_sub(n - report.pruned);
    candidates.truncate(room);
    candidates.sort_unstable();

    let mut children = Vec::with_capacity(candidates.len());
    for &i in &candidates {
        // Parent and child together composite like the parent alone.
        let parent = &mut scene.primitives[i];
        parent.opacity = 1.0 - (1.0 - parent.opacity).sqrt();
        let mut child = parent.clone();
        child.id = scene.allocate_id();
        child.track = None;
        child.mu_p += random_in_ball(rng, cfg.jitter * child.scale.mean());
        child.enforce_invariants();
        children.push(child);
    }

    scene.retain(&keep);
    state.retain(&keep);
    report.duplicated = children.len();
    for child in children {
        scene.push_primitive(child)?;
        state.push_primitive();
    }
    state.clear_accumulators();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::fit::test_scene;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn run(scene: &mut Scene, state: &mut OptState) -> DensifyReport {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        prune_and_densify(scene, state, &DensifyConfig::default(), &mut rng).unwrap()
    }

    #[test]
    fn quiet_scene_is_unchanged() {
        let (mut scene, _) = test_scene();
        let before = scene.primitives.clone();
        let mut state = OptState::new(before.len());
        state.accum.iter_mut().for_each(|a| *a = 1e-6);
        state.counts.iter_mut().for_each(|c| *c = 1);
        let r = run(&mut scene, &mut state);
        assert_eq!(r, DensifyReport::default());
        assert_eq!(scene.primitives, before);
        assert!(state.accum.iter().all(|a| *a == 0.0));
    }

    #[test]
    fn transparent_primitive_is_removed() {
        let (mut scene, _) = test_scene();
        let n = scene.primitives.len();
        let gone = scene.primitives[2].id;
        scene.primitives[2].opacity = 0.0;
        let mut state = OptState::new(n);
        run(&mut scene, &mut state);
        assert_eq!(scene.primitives.len(), n - 1);
        assert_eq!(scene.bindings.len(), n - 1);
        assert_eq!(state.moments.len(), n - 1);
        assert!(scene.primitives.iter().all(|p| p.id != gone));
    }

    #[test]
    fn high_gradient_primitive_is_duplicated() {
        let (mut scene, _) = test_scene();
        let n = scene.primitives.len();
        let mut state = OptState::new(n);
        state.accum[1] = 1.0;
        state.counts[1] = 2;
        state.moments[1].m[0] = 3.0;
        let parent = scene.primitives[1].clone();
        let r = run(&mut scene, &mut state);
        assert_eq!(r.duplicated, 1);
        assert_eq!(scene.primitives.len(), n + 1);
        let child = scene.primitives.last().unwrap();
        assert!((child.mu_p - parent.mu_p).norm() <= 0.1 * parent.scale.mean() + 1e-15);
        assert_eq!(child.state, parent.state);
        let split = 1.0 - (1.0 - parent.opacity).sqrt();
        assert_eq!(child.opacity, split);
        assert_eq!(scene.primitives[1].opacity, split);
        assert_eq!(child.cov, parent.cov);
        assert_eq!(child.track, None);
        assert_eq!(state.moments.last().unwrap().m[0], 0.0);
        let mut ids: Vec<u64> = scene.primitives.iter().map(|p| p.id).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), n + 1);
    }

    #[test]
    fn duplication_respects_the_cap() {
        let (mut scene, _) = test_scene();
        let n = scene.primitives.len();
        let mut state = OptState::new(n);
        state.accum.iter_mut().for_each(|a| *a = 1.0);
        state.counts.iter_mut().for_each(|c| *c = 1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = DensifyConfig {
            max_primitives: n + 2,
            ..DensifyConfig::default()
        };
        prune_and_densify(&mut scene, &mut state, &cfg, &mut rng).unwrap();
        assert_eq!(scene.primitives.len(), n + 2);
    }
}
