//! Projection models: viewing rays, the integration constant and
//! tangent-space Jacobians derived from normals.

use nalgebra::{Matrix3x2, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Normals whose cosine with the viewing ray falls below this value are
/// tilted toward the ray before a Jacobian is formed.
pub const SLANT_EPSILON: f64 = 0.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CameraError {
    #[error("focal lengths must be positive (fx = {fx}, fy = {fy})")]
    InvalidFocal { fx: f64, fy: f64 },
    #[error("normal is at grazing angle to the viewing ray (cos = {cos})")]
    Slant { cos: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Camera {
    Orthographic,
    Perspective { fx: f64, fy: f64, cx: f64, cy: f64 },
}

impl Camera {
    pub fn perspective(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self, CameraError> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(CameraError::InvalidFocal { fx, fy });
        }
        Ok(Camera::Perspective { fx, fy, cx, cy })
    }

    pub fn is_orthographic(&self) -> bool {
        matches!(self, Camera::Orthographic)
    }

    /// Unit viewing direction through screen point `u`.
    pub fn ray(&self, u: Vector2<f64>) -> Vector3<f64> {
        match self {
            Camera::Orthographic => Vector3::z(),
            Camera::Perspective { .. } => self.ray_unnormalized(u).normalize(),
        }
    }

    /// Viewing ray scaled to unit z-component, i.e. `K^-1 (u, v, 1)`.
    ///
    /// A point at z-depth `d` seen through `u` sits at `d * ray_unnormalized(u)`.
    pub fn ray_unnormalized(&self, u: Vector2<f64>) -> Vector3<f64> {
        match *self {
            Camera::Orthographic => Vector3::z(),
            Camera::Perspective { fx, fy, cx, cy } => Vector3::new((u.x - cx) / fx, (u.y - cy) / fy, 1.0),
        }
    }

    /// Per-axis integration constant: `(1, 1)` orthographic, inverse focal
    /// lengths otherwise.
    pub fn integration_constant(&self) -> Vector2<f64> {
        match *self {
            Camera::Orthographic => Vector2::new(1.0, 1.0),
            Camera::Perspective { fx, fy, .. } => Vector2::new(1.0 / fx, 1.0 / fy),
        }
    }

    /// Screen derivatives of the unit ray at `u`, as columns `(d/du, d/dv)`.
    fn ray_derivatives(&self, u: Vector2<f64>) -> (Vector3<f64>, Vector3<f64>) {
        match *self {
            Camera::Orthographic => (Vector3::zeros(), Vector3::zeros()),
            Camera::Perspective { fx, fy, .. } => {
                let raw = self.ray_unnormalized(u);
                let len = raw.norm();
                let du_raw = Vector3::new(1.0 / fx, 0.0, 0.0);
                let dv_raw = Vector3::new(0.0, 1.0 / fy, 0.0);
                let len3 = len * len * len;
                let du = du_raw / len - raw * (raw.dot(&du_raw) / len3);
                let dv = dv_raw / len - raw * (raw.dot(&dv_raw) / len3);
                (du, dv)
            }
        }
    }

    /// Surface tangents `(d phi/du, d phi/dv)` implied by normal `n` at `u`.
    ///
    /// Fails when `n` is within [`SLANT_EPSILON`] of perpendicular to the ray;
    /// see [`Camera::jacobian_clamped`] for the variant used during meshing.
    pub fn jacobian_from_normal(&self, n: &Vector3<f64>, u: Vector2<f64>) -> Result<Matrix3x2<f64>, CameraError> {
        let r = self.ray(u);
        let cos = n.dot(&r);
        if cos <= SLANT_EPSILON {
            return Err(CameraError::Slant { cos });
        }
        Ok(self.tangents(n, &r, u))
    }

    /// Like [`Camera::jacobian_from_normal`], but grazing normals are first
    /// rotated toward the ray until their cosine equals [`SLANT_EPSILON`].
    pub fn jacobian_clamped(&self, n: &Vector3<f64>, u: Vector2<f64>) -> Matrix3x2<f64> {
        let r = self.ray(u);
        let n = clamp_to_ray(n, &r);
        self.tangents(&n, &r, u)
    }

    fn tangents(&self, n: &Vector3<f64>, r: &Vector3<f64>, u: Vector2<f64>) -> Matrix3x2<f64> {
        match self {
            Camera::Orthographic => Matrix3x2::new(
                1.0,
                0.0, //
                0.0,
                1.0, //
                -n.x / n.z,
                -n.y / n.z,
            ),
            Camera::Perspective { .. } => {
                let (du, dv) = self.ray_derivatives(u);
                let nr = n.dot(r);
                // weak perspective: constant object distance of 1
                let cu = du - r * (n.dot(&du) / nr);
                let cv = dv - r * (n.dot(&dv) / nr);
                Matrix3x2::from_columns(&[cu, cv])
            }
        }
    }
}

/// Tilts `n` toward `r` so that `<n, r> >= SLANT_EPSILON`. Both inputs unit.
pub fn clamp_to_ray(n: &Vector3<f64>, r: &Vector3<f64>) -> Vector3<f64> {
    let cos = n.dot(r);
    if cos >= SLANT_EPSILON {
        return *n;
    }
    let tangent = n - r * cos;
    let tn = tangent.norm();
    let dir = if tn > 1e-300 {
        tangent / tn
    } else {
        // n anti-parallel to r: any perpendicular will do
        any_perpendicular(r)
    };
    r * SLANT_EPSILON + dir * (1.0 - SLANT_EPSILON * SLANT_EPSILON).sqrt()
}

fn any_perpendicular(v: &Vector3<f64>) -> Vector3<f64> {
    let a = v.abs();
    let axis = if a.x <= a.y && a.x <= a.z {
        Vector3::x()
    } else if a.y <= a.z {
        Vector3::y()
    } else {
        Vector3::z()
    };
    (axis - v * v.dot(&axis)).normalize()
}

/// `sqrt(det(J^T J))`: ratio of true surface area to screen area.
pub fn area_factor(j: &Matrix3x2<f64>) -> f64 {
    (j.transpose() * j).determinant().max(0.0).sqrt()
}
