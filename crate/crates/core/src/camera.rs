//! Pinhole cameras with a world-to-camera `[R|t]` convention.
//!
//! A world point `X` maps to camera space as `R·X + t`; pixel coordinates are
//! continuous with pixel `(x, y)` centred at `(x + 0.5, y + 0.5)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{Mat3, Vec3};

/// Camera-space depth below which geometry is treated as behind the camera.
pub const Z_NEAR: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Camera {
    pub id: u32,
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World-to-camera rotation, row-major.
    #[serde(rename = "R")]
    pub r: [[f64; 3]; 3],
    /// World-to-camera translation.
    pub t: [f64; 3],
}

impl Camera {
    /// Camera at `eye` looking at `target`, with image `y` pointing along `-up`.
    pub fn look_at(id: u32, width: u32, height: u32, focal: f64, eye: Vec3, target: Vec3, up: Vec3) -> Self {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        let rot = Mat3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let t = -(rot * eye);
        let mut r = [[0.0; 3]; 3];
        for (i, row) in r.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = rot[(i, j)];
            }
        }
        Camera {
            id,
            width,
            height,
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            r,
            t: [t.x, t.y, t.z],
        }
    }

    pub fn rotation(&self) -> Mat3 {
        Mat3::from_fn(|i, j| self.r[i][j])
    }

    pub fn translation(&self) -> Vec3 {
        Vec3::new(self.t[0], self.t[1], self.t[2])
    }

    /// Camera centre in world coordinates, `-Rᵀt`.
    pub fn center(&self) -> Vec3 {
        -(self.rotation().transpose() * self.translation())
    }

    pub fn to_camera(&self, x: &Vec3) -> Vec3 {
        self.rotation() * x + self.translation()
    }

    /// Projects a world point to `(u, v, z)`; `None` when `z <= Z_NEAR`.
    pub fn project(&self, x: &Vec3) -> Option<(f64, f64, f64)> {
        let p = self.to_camera(x);
        if p.z <= Z_NEAR {
            return None;
        }
        Some((self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy, p.z))
    }

    /// Lifts pixel coordinates with metric depth `d` to a world point:
    /// `X = Rᵀ(K⁻¹·[u·d, v·d, d]ᵀ − t)`.
    pub fn backproject(&self, u: f64, v: f64, d: f64) -> Option<Vec3> {
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        let cam = Vec3::new((u - self.cx) * d / self.fx, (v - self.cy) * d / self.fy, d);
        Some(self.rotation().transpose() * (cam - self.translation()))
    }

    /// The same view at `factor`× the resolution.
    pub fn scaled(&self, factor: u32) -> Camera {
        let f = factor as f64;
        Camera {
            width: self.width * factor,
            height: self.height * factor,
            fx: self.fx * f,
            fy: self.fy * f,
            cx: self.cx * f,
            cy: self.cy * f,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let rot = self.rotation();
        let ortho = (rot.transpose() * rot - Mat3::identity()).abs().max();
        if ortho > 1e-6 || (rot.determinant() - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidInput(format!(
                "camera {}: rotation is not a proper orthonormal matrix",
                self.id
            )));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidInput(format!("camera {}: focal lengths must be positive", self.id)));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64 && self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(Error::InvalidInput(format!(
                "camera {}: principal point outside the image",
                self.id
            )));
        }
        if self.t.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("camera {}: non-finite translation", self.id)));
        }
        Ok(())
    }
}
