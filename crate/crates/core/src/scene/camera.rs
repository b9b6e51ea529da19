use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pinhole camera with a world-to-camera rigid pose.
///
/// Camera axes: +x right, +y down, +z forward. Pixel `(x, y)` refers to the
/// pixel center at integer coordinates. Depth is camera-space z.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Row-major world-to-camera rotation.
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
    pub width: usize,
    pub height: usize,
}

const ORTHONORMAL_TOL: f64 = 1e-9;

impl Camera {
    /// Camera at `eye` looking at `target` with world +y up.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        fov_x_deg: f64,
        width: usize,
        height: usize,
    ) -> Self {
        let forward = (target - eye).normalize();
        let right = forward.cross(&Vector3::y()).normalize();
        let down = forward.cross(&right).normalize();
        let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let t = -(r * eye);
        let fx = (width as f64 / 2.0) / (fov_x_deg.to_radians() / 2.0).tan();
        Self {
            fx,
            fy: fx,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            rotation: [
                [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
                [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
                [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
            ],
            translation: [t.x, t.y, t.z],
            width,
            height,
        }
    }

    #[inline]
    pub fn r(&self) -> Matrix3<f64> {
        let m = &self.rotation;
        Matrix3::new(
            m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2],
        )
    }

    #[inline]
    pub fn t(&self) -> Vector3<f64> {
        Vector3::from(self.translation)
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.r().transpose() * self.t())
    }

    pub fn validate(&self, name: &str) -> Result<()> {
        let fail = |reason: String| {
            Err(Error::Validation {
                what: name.to_string(),
                reason,
            })
        };
        let r = self.r();
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if !(err <= ORTHONORMAL_TOL) {
            return fail(format!(
                "rotation is not orthonormal (max |RᵀR - I| = {err:.3e})"
            ));
        }
        if r.determinant() < 0.0 {
            return fail("rotation has negative determinant".into());
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return fail(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            ));
        }
        if self.width == 0 || self.height == 0 {
            return fail("zero image dimension".into());
        }
        if !(self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64)
        {
            return fail(format!(
                "principal point ({}, {}) outside image",
                self.cx, self.cy
            ));
        }
        if !self.translation.iter().all(|v| v.is_finite()) {
            return fail("non-finite translation".into());
        }
        Ok(())
    }

    #[inline]
    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.r() * p + self.t()
    }

    /// Projects a world point; `None` when it is not in front of the camera.
    #[inline]
    pub fn project(&self, p: &Vector3<f64>) -> Option<([f64; 2], f64)> {
        let c = self.world_to_camera(p);
        if c.z <= 0.0 {
            return None;
        }
        Some((
            [self.fx * c.x / c.z + self.cx, self.fy * c.y / c.z + self.cy],
            c.z,
        ))
    }

    /// World point at camera-space depth `depth` along the ray through `(x, y)`.
    #[inline]
    pub fn unproject(&self, x: f64, y: f64, depth: f64) -> Vector3<f64> {
        let c = Vector3::new(
            (x - self.cx) / self.fx * depth,
            (y - self.cy) / self.fy * depth,
            depth,
        );
        self.r().transpose() * (c - self.t())
    }

    /// World ray through pixel `(x, y)`, with the direction scaled so that the
    /// ray parameter equals camera-space depth.
    #[inline]
    pub fn ray(&self, x: f64, y: f64) -> (Vector3<f64>, Vector3<f64>) {
        let d = Vector3::new((x - self.cx) / self.fx, (y - self.cy) / self.fy, 1.0);
        (self.center(), self.r().transpose() * d)
    }

    #[inline]
    pub fn in_bounds(&self, p: [f64; 2]) -> bool {
        p[0] >= 0.0
            && p[1] >= 0.0
            && p[0] <= (self.width - 1) as f64
            && p[1] <= (self.height - 1) as f64
    }
}
