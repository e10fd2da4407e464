//! Pinhole cameras with per-frame camera-to-world poses.
//!
//! Pixel centers sit at integer coordinates; the image covers
//! `[-0.5, width - 0.5) x [-0.5, height - 0.5)`.

use nalgebra::{Matrix2x3, Vector2, Vector3};

use crate::error::{Error, Result};
use crate::math::RigidTransform;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite()) {
            return Err(Error::DegenerateInput(format!(
                "focal lengths must be positive, got fx={fx} fy={fy}"
            )));
        }
        if !(cx.is_finite() && cy.is_finite()) {
            return Err(Error::DegenerateInput("principal point is not finite".into()));
        }
        Ok(Intrinsics { fx, fy, cx, cy })
    }

    /// Pixel coordinates of a camera-frame point (`z` must be nonzero).
    pub fn project(&self, p: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }

    /// Camera-frame point at z-depth `depth` behind pixel `u`.
    pub fn unproject(&self, u: &Vector2<f64>, depth: f64) -> Vector3<f64> {
        Vector3::new(
            (u.x - self.cx) / self.fx * depth,
            (u.y - self.cy) / self.fy * depth,
            depth,
        )
    }

    /// Jacobian of [`Intrinsics::project`] at a camera-frame point.
    pub fn jacobian(&self, p: &Vector3<f64>) -> Matrix2x3<f64> {
        let iz = 1.0 / p.z;
        let iz2 = iz * iz;
        Matrix2x3::new(
            self.fx * iz,
            0.0,
            -self.fx * p.x * iz2,
            0.0,
            self.fy * iz,
            -self.fy * p.y * iz2,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    /// Camera-to-world pose.
    pub pose: RigidTransform,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn new(intrinsics: Intrinsics, pose: RigidTransform, width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::DegenerateInput(format!(
                "image size must be positive, got {width}x{height}"
            )));
        }
        Ok(Camera {
            intrinsics,
            pose,
            width,
            height,
        })
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.pose.rotation.inverse().rotate(&(p - self.pose.translation))
    }

    pub fn camera_to_world(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.pose.apply_point(p)
    }

    /// Pixel coordinates and z-depth of a world point.
    pub fn project(&self, p: &Vector3<f64>) -> (Vector2<f64>, f64) {
        let pc = self.world_to_camera(p);
        (self.intrinsics.project(&pc), pc.z)
    }

    /// World point at z-depth `depth` behind pixel `u`.
    pub fn unproject(&self, u: &Vector2<f64>, depth: f64) -> Vector3<f64> {
        self.camera_to_world(&self.intrinsics.unproject(u, depth))
    }

    pub fn contains_pixel(&self, u: &Vector2<f64>) -> bool {
        u.x >= -0.5 && u.y >= -0.5 && u.x < self.width as f64 - 0.5 && u.y < self.height as f64 - 0.5
    }

    pub fn diagonal(&self) -> f64 {
        (self.width as f64).hypot(self.height as f64)
    }
}
