//! Synthetic scenes with known motion, rendered by this crate's own splatter.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::camera::{Camera, Intrinsics};
use crate::error::{Error, Result};
use crate::hyper::{DynamicStateMean, FactoredCovariance, HyperGaussian};
use crate::image::{FrameSet, Image};
use crate::io::{self, SceneInputs};
use crate::math::{RigidTransform, Rotation};
use crate::render::{project_gaussian, render, RenderOptions, Splat2D};
use crate::tracks::{project_trajectory, Trajectory};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MotionKind {
    Static,
    Translate,
    /// Rotation about the world z axis (the optical axis).
    RigidRotate,
    /// Rotation about the world y axis.
    Spin,
    /// A bar whose `x >= 0` half swings about a hinge at the origin.
    TwoPartArticulated,
}

impl FromStr for MotionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "static" => Ok(MotionKind::Static),
            "translate" => Ok(MotionKind::Translate),
            "rigid-rotate" => Ok(MotionKind::RigidRotate),
            "spin" => Ok(MotionKind::Spin),
            "two-part-articulated" => Ok(MotionKind::TwoPartArticulated),
            other => Err(Error::SceneSpec(format!("unknown motion kind `{other}`"))),
        }
    }
}

impl fmt::Display for MotionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MotionKind::Static => "static",
            MotionKind::Translate => "translate",
            MotionKind::RigidRotate => "rigid-rotate",
            MotionKind::Spin => "spin",
            MotionKind::TwoPartArticulated => "two-part-articulated",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub motion: MotionKind,
    /// Rotation per frame for the rotating motions, in degrees.
    pub omega_deg: f64,
    /// Peak hinge angle of the articulated motion, in degrees.
    pub amplitude_deg: f64,
    /// Translation per frame along x.
    pub speed: f64,
    pub frames: usize,
    pub tracks: usize,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            motion: MotionKind::Static,
            omega_deg: 10.0,
            amplitude_deg: 40.0,
            speed: 0.02,
            frames: 24,
            tracks: 40,
            width: 64,
            height: 64,
            seed: 7,
        }
    }
}

impl SceneSpec {
    pub fn new(motion: MotionKind) -> Self {
        SceneSpec {
            motion,
            ..Self::default()
        }
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut spec = SceneSpec::default();
        let mut motion = None;
        for (k, v) in pairs {
            let num = |v: &str| -> Result<f64> {
                v.parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| Error::SceneSpec(format!("`{k}` must be a number, got `{v}`")))
            };
            let int = |v: &str| -> Result<usize> {
                v.parse::<usize>()
                    .map_err(|_| Error::SceneSpec(format!("`{k}` must be a nonnegative integer, got `{v}`")))
            };
            match k {
                "motion" => motion = Some(v.parse()?),
                "omega_deg" => spec.omega_deg = num(v)?,
                "amplitude_deg" => spec.amplitude_deg = num(v)?,
                "speed" => spec.speed = num(v)?,
                "frames" => spec.frames = int(v)?,
                "tracks" => spec.tracks = int(v)?,
                "width" => spec.width = int(v)?,
                "height" => spec.height = int(v)?,
                "seed" => spec.seed = int(v)? as u64,
                other => return Err(Error::SceneSpec(format!("unknown key `{other}`"))),
            }
        }
        spec.motion = motion.ok_or_else(|| Error::SceneSpec("`motion` is required".into()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn parse(text: &str, path: &str) -> Result<Self> {
        let kv = io::parse_key_values(text, path)?;
        Self::from_pairs(kv.iter().map(|(k, (_, v))| (k.as_str(), v.as_str())))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn to_text(&self) -> String {
        format!(
            "motion={}\nomega_deg={}\namplitude_deg={}\nspeed={}\nframes={}\ntracks={}\nwidth={}\nheight={}\nseed={}\n",
            self.motion,
            self.omega_deg,
            self.amplitude_deg,
            self.speed,
            self.frames,
            self.tracks,
            self.width,
            self.height,
            self.seed
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 {
            return Err(Error::SceneSpec(format!("at least 2 frames are required, got {}", self.frames)));
        }
        if self.tracks < 3 {
            return Err(Error::SceneSpec(format!("at least 3 tracks are required, got {}", self.tracks)));
        }
        if self.width < 11 || self.height < 11 {
            return Err(Error::SceneSpec("images must be at least 11x11".into()));
        }
        Ok(())
    }

    /// Number of independently moving parts.
    pub fn parts(&self) -> usize {
        match self.motion {
            MotionKind::TwoPartArticulated => 2,
            _ => 1,
        }
    }

    /// World transform of `part` at `frame`, relative to frame 0.
    pub fn transform(&self, part: usize, frame: usize) -> RigidTransform {
        let t = frame as f64;
        let rot = |axis: Vector3<f64>, angle: f64| RigidTransform::new(Rotation::from_axis_angle(&axis, angle), Vector3::zeros());
        match self.motion {
            MotionKind::Static => RigidTransform::identity(),
            MotionKind::Translate => RigidTransform::new(Rotation::identity(), Vector3::new(self.speed * t, 0.0, 0.0)),
            MotionKind::RigidRotate => rot(Vector3::z(), self.omega_deg.to_radians() * t),
            MotionKind::Spin => rot(Vector3::y(), self.omega_deg.to_radians() * t),
            MotionKind::TwoPartArticulated => {
                if part == 0 {
                    RigidTransform::identity()
                } else {
                    let phase = 2.0 * PI * t / (self.frames - 1) as f64;
                    rot(Vector3::z(), self.amplitude_deg.to_radians() * phase.sin())
                }
            }
        }
    }
}

/// Known motion of a synthetic scene.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    /// Part index of each track.
    pub labels: Vec<usize>,
    /// `transforms[frame][part]`, relative to frame 0.
    pub transforms: Vec<Vec<RigidTransform>>,
    /// Canonical (frame-0) primitives, one per track.
    pub primitives: Vec<HyperGaussian>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub spec: SceneSpec,
    pub inputs: SceneInputs,
    pub ground_truth: GroundTruth,
}

pub fn synthetic_camera(width: usize, height: usize) -> Camera {
    let f = 1.2 * width as f64;
    Camera::new(
        Intrinsics::new(f, f, (width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0).expect("positive focal length"),
        RigidTransform::new(Rotation::identity(), Vector3::new(0.0, 0.0, -4.0)),
        width,
        height,
    )
    .expect("valid camera")
}

/// Uniformly distributed rotation.
pub fn random_rotation(rng: &mut impl Rng) -> Rotation {
    let (u1, u2, u3): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
    let a = (1.0 - u1).sqrt();
    let b = u1.sqrt();
    let (t2, t3) = (2.0 * PI * u2, 2.0 * PI * u3);
    Rotation::from_wxyz(b * t3.cos(), a * t2.sin(), a * t2.cos(), b * t3.sin()).expect("unit quaternion")
}

fn sample_points(spec: &SceneSpec, rng: &mut impl Rng) -> (Vec<Vector3<f64>>, Vec<usize>) {
    let mut pts = Vec::with_capacity(spec.tracks);
    let mut labels = Vec::with_capacity(spec.tracks);
    for _ in 0..spec.tracks {
        let p = match spec.motion {
            MotionKind::TwoPartArticulated => Vector3::new(
                rng.random_range(-1.2..1.2),
                rng.random_range(-0.25..0.25),
                rng.random_range(-0.25..0.25),
            ),
            _ => loop {
                let p = Vector3::new(rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8));
                if p.norm() <= 0.8 {
                    break p;
                }
            },
        };
        let label = if spec.motion == MotionKind::TwoPartArticulated && p.x >= 0.0 { 1 } else { 0 };
        pts.push(p);
        labels.push(label);
    }
    (pts, labels)
}

/// Renders canonical primitives moved rigidly by their part transforms.
pub fn render_ground_truth(
    primitives: &[HyperGaussian],
    labels: &[usize],
    transforms: &[RigidTransform],
    camera: &Camera,
    options: &RenderOptions,
) -> Image {
    let splats: Vec<Splat2D> = primitives
        .iter()
        .zip(labels)
        .filter_map(|(hg, &part)| {
            let tr = &transforms[part];
            let mu = tr.apply_point(&hg.mu_p);
            let rot = tr.rotation * hg.rotation;
            project_gaussian(&mu, &hg.scale, &rot, camera, options.cull_sigma)
                .map(|p| Splat2D::new(hg.id, &p, hg.opacity, hg.color))
        })
        .collect();
    render(&splats, camera.width, camera.height, options)
}

pub fn generate_synthetic_scene(spec: &SceneSpec) -> Result<SyntheticScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (points, labels) = sample_points(spec, &mut rng);
    let primitives: Vec<HyperGaussian> = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let scale = Vector3::new(
                rng.random_range(0.06..0.15),
                rng.random_range(0.06..0.15),
                rng.random_range(0.06..0.15),
            );
            let rotation = random_rotation(&mut rng);
            let opacity = rng.random_range(0.6..0.95);
            let color = Vector3::new(
                rng.random_range(0.1..0.95),
                rng.random_range(0.1..0.95),
                rng.random_range(0.1..0.95),
            );
            HyperGaussian {
                id: i as u64,
                track: Some(i),
                mu_p: *p,
                scale,
                rotation,
                opacity,
                color,
                state: DynamicStateMean::at(0.0, Rotation::identity()),
                cov: FactoredCovariance::isotropic(1.0),
            }
        })
        .collect();

    let transforms: Vec<Vec<RigidTransform>> = (0..spec.frames)
        .map(|t| (0..spec.parts()).map(|part| spec.transform(part, t)).collect())
        .collect();
    let trajectories: Vec<Trajectory> = points
        .iter()
        .zip(&labels)
        .map(|(p, &part)| Trajectory::from_positions(transforms.iter().map(|tr| tr[part].apply_point(p)).collect()))
        .collect();
    let camera = synthetic_camera(spec.width, spec.height);
    let cameras = vec![camera; spec.frames];
    let options = RenderOptions::default();
    let images = transforms
        .iter()
        .map(|tr| render_ground_truth(&primitives, &labels, tr, &camera, &options).quantized())
        .collect();
    let observations = trajectories
        .iter()
        .map(|t| project_trajectory(t, &cameras))
        .collect::<Result<Vec<_>>>()?;
    Ok(SyntheticScene {
        spec: spec.clone(),
        inputs: SceneInputs {
            cameras,
            trajectories,
            observations,
            frames: FrameSet::new(images)?,
        },
        ground_truth: GroundTruth {
            labels,
            transforms,
            primitives,
        },
    })
}

pub const GROUND_TRUTH_FILE: &str = "ground_truth.txt";
pub const SPEC_FILE: &str = "scene.txt";

/// `label <track> <part>` lines followed by `transform <t> <part> qw qx qy qz tx ty tz` lines.
pub fn format_ground_truth(gt: &GroundTruth) -> String {
    let mut s = String::new();
    for (i, l) in gt.labels.iter().enumerate() {
        let _ = writeln!(s, "label {i} {l}");
    }
    for (t, parts) in gt.transforms.iter().enumerate() {
        for (p, tr) in parts.iter().enumerate() {
            let q = tr.rotation.wxyz();
            let v = tr.translation;
            let _ = writeln!(s, "transform {t} {p} {} {} {} {} {} {} {}", q[0], q[1], q[2], q[3], v.x, v.y, v.z);
        }
    }
    s
}

/// Writes the scene inputs plus the spec and ground-truth motion.
pub fn save_synthetic_scene(dir: &Path, scene: &SyntheticScene) -> Result<()> {
    io::save_scene_inputs(dir, &scene.inputs)?;
    let spec_path = dir.join(SPEC_FILE);
    std::fs::write(&spec_path, scene.spec.to_text()).map_err(|e| Error::io(&spec_path, e))?;
    let gt_path = dir.join(GROUND_TRUTH_FILE);
    std::fs::write(&gt_path, format_ground_truth(&scene.ground_truth)).map_err(|e| Error::io(&gt_path, e))
}

/// Part labels read back from a ground-truth file.
pub fn parse_labels(text: &str) -> BTreeMap<usize, usize> {
    text.lines()
        .filter_map(|l| {
            let mut it = l.split_whitespace();
            (it.next() == Some("label")).then_some(())?;
            Some((it.next()?.parse().ok()?, it.next()?.parse().ok()?))
        })
        .collect()
}
