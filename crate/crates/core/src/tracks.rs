//! Point trajectories in 3D and their 2D (pixel + depth) observations.

use nalgebra::{Vector2, Vector3};

use crate::camera::Camera;
use crate::error::{Error, Result};

/// World positions of one tracked point, one entry per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub positions: Vec<Vector3<f64>>,
    pub valid: Vec<bool>,
}

impl Trajectory {
    pub fn new(positions: Vec<Vector3<f64>>, valid: Vec<bool>) -> Result<Self> {
        if positions.len() != valid.len() {
            return Err(Error::Consistency(format!(
                "trajectory has {} positions but {} validity flags",
                positions.len(),
                valid.len()
            )));
        }
        Ok(Trajectory { positions, valid })
    }

    /// A trajectory valid at every frame.
    pub fn from_positions(positions: Vec<Vector3<f64>>) -> Self {
        let valid = vec![true; positions.len()];
        Trajectory { positions, valid }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Number of consecutive valid frames starting at frame 0.
    pub fn leading_valid(&self) -> usize {
        self.valid.iter().take_while(|&&v| v).count()
    }
}

/// Pixel coordinates and z-depths of one tracked point, one entry per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Track2d {
    pub pixels: Vec<Vector2<f64>>,
    pub depths: Vec<f64>,
    pub valid: Vec<bool>,
}

impl Track2d {
    pub fn new(pixels: Vec<Vector2<f64>>, depths: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        if pixels.len() != depths.len() || pixels.len() != valid.len() {
            return Err(Error::Consistency(format!(
                "2D track lengths differ: {} pixels, {} depths, {} flags",
                pixels.len(),
                depths.len(),
                valid.len()
            )));
        }
        Ok(Track2d { pixels, depths, valid })
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }
}

/// Back-projects a 2D track through per-frame cameras:
/// `tau_t = W_t * K^-1 (u_t, d_t)`.
///
/// Pixels outside the image are marked invalid; a nonpositive depth on a
/// valid frame is an error.
pub fn lift_track(track: &Track2d, cameras: &[Camera]) -> Result<Trajectory> {
    if track.len() != cameras.len() {
        return Err(Error::Consistency(format!(
            "track spans {} frames but {} cameras were given",
            track.len(),
            cameras.len()
        )));
    }
    let mut positions = Vec::with_capacity(track.len());
    let mut valid = Vec::with_capacity(track.len());
    for (frame, cam) in cameras.iter().enumerate() {
        let u = track.pixels[frame];
        let d = track.depths[frame];
        let mut ok = track.valid[frame];
        if ok && !(d > 0.0 && d.is_finite()) {
            return Err(Error::InvalidDepth { frame, depth: d });
        }
        if ok && !cam.contains_pixel(&u) {
            ok = false;
        }
        if ok {
            positions.push(cam.unproject(&u, d));
        } else {
            positions.push(Vector3::zeros());
        }
        valid.push(ok);
    }
    Ok(Trajectory { positions, valid })
}

/// Projects a trajectory through per-frame cameras, giving pixel and z-depth.
/// Frames behind the camera or outside the image are marked invalid.
pub fn project_trajectory(traj: &Trajectory, cameras: &[Camera]) -> Result<Track2d> {
    if traj.len() != cameras.len() {
        return Err(Error::Consistency(format!(
            "trajectory spans {} frames but {} cameras were given",
            traj.len(),
            cameras.len()
        )));
    }
    let mut pixels = Vec::with_capacity(traj.len());
    let mut depths = Vec::with_capacity(traj.len());
    let mut valid = Vec::with_capacity(traj.len());
    for (frame, cam) in cameras.iter().enumerate() {
        let (u, d) = cam.project(&traj.positions[frame]);
        pixels.push(u);
        depths.push(d);
        valid.push(traj.valid[frame] && d > 0.0 && cam.contains_pixel(&u));
    }
    Ok(Track2d { pixels, depths, valid })
}
