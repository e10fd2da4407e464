//! A fitted (or fittable) scene: cameras, the orientation field, hyper-Gaussian
//! primitives and their skinning bindings, plus the per-frame forward pass.

use nalgebra::{Matrix4, Vector3};
use rayon::prelude::*;

use crate::camera::Camera;
use crate::deform::{compute_skinning_weights, deform, DeformedPose, FieldSnapshot, SkinningBinding};
use crate::error::{Error, Result};
use crate::field::OrientationField;
use crate::hyper::{
    apply_offsets, evaluate, ConditionalMean, ConditioningMode, DynamicStateMean, FactoredCovariance,
    HyperEval, HyperGaussian, Mat9x4, ModulatedGeometry,
};
use crate::image::{FrameSet, Image};
use crate::math::{centroid, so3_blend, Rotation};
use crate::render::{project_gaussian, render, Projection, RenderOptions, Splat2D};
use crate::tracks::Trajectory;

/// Initial values for track-seeded primitives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InitConfig {
    /// Isotropic scale as a fraction of the mean nearest-neighbor distance.
    pub scale_fraction: f64,
    pub opacity: f64,
    /// Initial time standard deviation (normalized time units).
    pub time_sigma: f64,
    /// Initial orientation standard deviation (radians).
    pub orientation_sigma: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            scale_fraction: 0.5,
            opacity: 0.5,
            time_sigma: 1.0,
            orientation_sigma: 2.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Scene {
    pub cameras: Vec<Camera>,
    pub field: OrientationField,
    pub primitives: Vec<HyperGaussian>,
    pub bindings: Vec<SkinningBinding>,
    pub options: RenderOptions,
    pub mode: ConditioningMode,
    /// Anchors per skinning binding.
    pub skin_k: usize,
    next_id: u64,
}

/// Forward quantities of one primitive at one query.
#[derive(Clone, Copy, Debug)]
pub struct PrimitiveView {
    pub pose: DeformedPose,
    pub eval: HyperEval,
    pub geometry: ModulatedGeometry,
    /// `None` when culled (or dropped at an orientation branch cut).
    pub projection: Option<Projection>,
}

/// One rendered query: per-primitive views and the splats they produced.
#[derive(Clone, Debug)]
pub struct SceneView {
    pub t_prime: f64,
    pub camera: Camera,
    pub views: Vec<Option<PrimitiveView>>,
    pub splats: Vec<Splat2D>,
    /// Primitive index of each splat.
    pub owners: Vec<usize>,
}

impl SceneView {
    pub fn image(&self, options: &RenderOptions) -> Image {
        render(&self.splats, self.camera.width, self.camera.height, options)
    }
}

/// Mean distance from each point to its nearest other point.
pub fn mean_nearest_distance(points: &[Vector3<f64>]) -> f64 {
    if points.len() < 2 {
        return 1.0;
    }
    let total: f64 = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            points
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, q)| (p - q).norm())
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    let mean = total / points.len() as f64;
    if mean > 0.0 {
        mean
    } else {
        1.0
    }
}

fn sample_color(img: &Image, camera: &Camera, p: &Vector3<f64>) -> Vector3<f64> {
    let (u, depth) = camera.project(p);
    if !(depth > 0.0) || !camera.contains_pixel(&u) {
        return Vector3::repeat(0.5);
    }
    let x = (u.x.round().max(0.0) as usize).min(img.width() - 1);
    let y = (u.y.round().max(0.0) as usize).min(img.height() - 1);
    Vector3::from(img.pixel(x, y))
}

impl Scene {
    pub fn new(
        cameras: Vec<Camera>,
        field: OrientationField,
        primitives: Vec<HyperGaussian>,
        options: RenderOptions,
        mode: ConditioningMode,
        skin_k: usize,
    ) -> Result<Self> {
        if cameras.len() != field.frames() {
            return Err(Error::Consistency(format!(
                "{} cameras but the field spans {} frames",
                cameras.len(),
                field.frames()
            )));
        }
        let bindings = primitives
            .iter()
            .map(|hg| compute_skinning_weights(&hg.mu_p, &field, skin_k))
            .collect::<Result<Vec<_>>>()?;
        let next_id = primitives.iter().map(|p| p.id + 1).max().unwrap_or(0);
        Ok(Scene {
            cameras,
            field,
            primitives,
            bindings,
            options,
            mode,
            skin_k,
            next_id,
        })
    }

    /// One primitive per trajectory, seeded at its frame-0 position with the
    /// color observed there.
    pub fn seed_primitives(
        trajectories: &[Trajectory],
        field: &OrientationField,
        frames: &FrameSet,
        camera: &Camera,
        skin_k: usize,
        init: &InitConfig,
    ) -> Result<Vec<HyperGaussian>> {
        let starts: Vec<Vector3<f64>> = trajectories.iter().map(|t| t.positions[0]).collect();
        let scale = init.scale_fraction * mean_nearest_distance(&starts);
        let mid = FieldSnapshot::new(field, 0.5)?;
        let first = frames.get(0)?;
        let mut cov_l = Matrix4::identity();
        cov_l[(0, 0)] = init.time_sigma;
        for i in 1..4 {
            cov_l[(i, i)] = init.orientation_sigma;
        }
        starts
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let binding = compute_skinning_weights(p, field, skin_k)?;
                let rots: Vec<Rotation> = binding.anchors.iter().map(|&a| mid.orientations[a]).collect();
                let orientation = so3_blend(&binding.weights, &rots)?;
                Ok(HyperGaussian {
                    id: i as u64,
                    track: Some(i),
                    mu_p: *p,
                    scale: Vector3::repeat(scale),
                    rotation: Rotation::identity(),
                    opacity: init.opacity,
                    color: sample_color(first, camera, p),
                    state: DynamicStateMean::at(0.5, orientation),
                    cov: FactoredCovariance::new(cov_l, Mat9x4::zeros()),
                })
            })
            .collect()
    }

    pub fn next_id(&self) -> u64 {
        self.next_id
    }

    pub fn allocate_id(&mut self) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        id
    }

    pub fn frames(&self) -> usize {
        self.cameras.len()
    }

    pub fn camera(&self, frame: usize) -> Result<&Camera> {
        self.cameras.get(frame).ok_or(Error::IndexOutOfRange {
            index: frame,
            len: self.cameras.len(),
        })
    }

    /// Geometry of primitive `i` at a snapshot, before projection.
    pub fn primitive_state(
        &self,
        i: usize,
        snapshot: &FieldSnapshot,
    ) -> Result<Option<(DeformedPose, HyperEval, ModulatedGeometry)>> {
        let hg = &self.primitives[i];
        let pose = deform(hg, &self.bindings[i], snapshot)?;
        let eval = match evaluate(hg, &pose.context, self.mode) {
            Ok(e) => e,
            Err(Error::BranchAmbiguity { .. }) => return Ok(None),
            Err(e) => return Err(e),
        };
        let geometry = apply_offsets(hg, &pose.position, &pose.rotation, &ConditionalMean::from_vector(&eval.offset));
        Ok(Some((pose, eval, geometry)))
    }

    /// Forward pass at normalized time `t_prime` seen through `camera`.
    pub fn view_at(&self, t_prime: f64, camera: &Camera) -> Result<SceneView> {
        let snapshot = FieldSnapshot::new(&self.field, t_prime)?;
        let views: Vec<Option<PrimitiveView>> = (0..self.primitives.len())
            .into_par_iter()
            .map(|i| {
                Ok(self.primitive_state(i, &snapshot)?.map(|(pose, eval, geometry)| PrimitiveView {
                    pose,
                    eval,
                    geometry,
                    projection: project_gaussian(
                        &geometry.mu_p,
                        &geometry.scale,
                        &geometry.rotation,
                        camera,
                        self.options.cull_sigma,
                    ),
                }))
            })
            .collect::<Result<_>>()?;
        let mut splats = Vec::new();
        let mut owners = Vec::new();
        for (i, v) in views.iter().enumerate() {
            if let Some(PrimitiveView {
                projection: Some(p),
                eval,
                ..
            }) = v
            {
                let hg = &self.primitives[i];
                splats.push(Splat2D::new(hg.id, p, eval.opacity, hg.color));
                owners.push(i);
            }
        }
        Ok(SceneView {
            t_prime,
            camera: *camera,
            views,
            splats,
            owners,
        })
    }

    pub fn view(&self, frame: usize) -> Result<SceneView> {
        let camera = *self.camera(frame)?;
        self.view_at(self.field.frame_time(frame), &camera)
    }

    pub fn render_frame(&self, frame: usize) -> Result<Image> {
        Ok(self.view(frame)?.image(&self.options))
    }

    pub fn render_at(&self, t_prime: f64, camera: &Camera) -> Result<Image> {
        Ok(self.view_at(t_prime, camera)?.image(&self.options))
    }

    /// Recomputes the skinning binding of primitive `i` from its canonical position.
    pub fn rebind(&mut self, i: usize) -> Result<()> {
        self.bindings[i] = compute_skinning_weights(&self.primitives[i].mu_p, &self.field, self.skin_k)?;
        Ok(())
    }

    pub fn push_primitive(&mut self, hg: HyperGaussian) -> Result<()> {
        let binding = compute_skinning_weights(&hg.mu_p, &self.field, self.skin_k)?;
        self.next_id = self.next_id.max(hg.id + 1);
        self.primitives.push(hg);
        self.bindings.push(binding);
        Ok(())
    }

    /// Keeps primitives for which `keep` holds, preserving order.
    pub fn retain(&mut self, keep: &[bool]) {
        let mut k = keep.iter();
        self.primitives.retain(|_| *k.next().expect("one flag per primitive"));
        let mut k = keep.iter();
        self.bindings.retain(|_| *k.next().expect("one flag per primitive"));
    }

    pub fn centroid(&self) -> Vector3<f64> {
        centroid(&self.primitives.iter().map(|p| p.mu_p).collect::<Vec<_>>())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::Intrinsics;
    use crate::field::FieldConfig;
    use crate::math::RigidTransform;

    fn setup() -> (Vec<Camera>, Vec<Trajectory>, FrameSet) {
        let cam = Camera::new(
            Intrinsics::new(40.0, 40.0, 15.5, 15.5).unwrap(),
            RigidTransform::new(Rotation::identity(), Vector3::new(0.0, 0.0, -4.0)),
            32,
            32,
        )
        .unwrap();
        let trajs: Vec<Trajectory> = (0..10)
            .map(|i| {
                let a = i as f64 * 0.6;
                let base = Vector3::new(a.cos() * 0.5, a.sin() * 0.5, 0.1 * (i % 3) as f64);
                Trajectory::from_positions((0..6).map(|t| base + Vector3::new(0.05 * t as f64, 0.0, 0.0)).collect())
            })
            .collect();
        let frames = FrameSet::new(vec![Image::filled(32, 32, [0.2, 0.3, 0.4]); 6]).unwrap();
        (vec![cam; 6], trajs, frames)
    }

    #[test]
    fn seeded_scene_renders_and_is_consistent() {
        let (cams, trajs, frames) = setup();
        let field = OrientationField::build(&trajs, FieldConfig { k: 4, window: 3 }).unwrap();
        let prims = Scene::seed_primitives(&trajs, &field, &frames, &cams[0], 4, &InitConfig::default()).unwrap();
        assert_eq!(prims.len(), 10);
        assert!(prims.iter().all(|p| p.color == Vector3::new(0.2, 0.3, 0.4)));
        let scene = Scene::new(cams, field, prims, RenderOptions::default(), ConditioningMode::Full, 4).unwrap();
        assert_eq!(scene.next_id(), 10);
        let v0 = scene.view(0).unwrap();
        assert_eq!(v0.splats.len(), 10);
        // At the reference frame primitives sit at their canonical positions.
        for (i, v) in v0.views.iter().enumerate() {
            let v = v.unwrap();
            assert_eq!(v.pose.position, scene.primitives[i].mu_p);
        }
        let img = scene.render_frame(3).unwrap();
        assert!(img.data().iter().any(|&v| v > 0.0));
        assert_eq!(img, scene.render_frame(3).unwrap());
    }

    #[test]
    fn retain_and_push_keep_bindings_aligned() {
        let (cams, trajs, frames) = setup();
        let field = OrientationField::build(&trajs, FieldConfig { k: 4, window: 3 }).unwrap();
        let prims = Scene::seed_primitives(&trajs, &field, &frames, &cams[0], 4, &InitConfig::default()).unwrap();
        let mut scene = Scene::new(cams, field, prims, RenderOptions::default(), ConditioningMode::Full, 4).unwrap();
        let mut keep = vec![true; 10];
        keep[2] = false;
        scene.retain(&keep);
        assert_eq!(scene.primitives.len(), 9);
        assert_eq!(scene.bindings.len(), 9);
        let mut child = scene.primitives[0].clone();
        child.id = scene.allocate_id();
        scene.push_primitive(child).unwrap();
        assert_eq!(scene.primitives.last().unwrap().id, 10);
        assert_eq!(scene.next_id(), 11);
    }

    #[test]
    fn mean_nearest_distance_of_a_grid() {
        let pts = vec![Vector3::zeros(), Vector3::x(), Vector3::x() * 3.0];
        assert!((mean_nearest_distance(&pts) - (1.0 + 1.0 + 2.0) / 3.0).abs() < 1e-15);
    }
}
