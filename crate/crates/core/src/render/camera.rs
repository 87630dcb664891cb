use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussians::{matrix_to_quat, quat_to_matrix, Mat3};
use crate::tensor::Real;

/// Pinhole camera. The view frame has `x` right, `y` down and `z` forward;
/// `p_view = R p_world + t` with `R` the rotation of `rotation`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    /// Unit quaternion `(w, x, y, z)`, world to view.
    pub rotation: [Real; 4],
    pub translation: [Real; 3],
    pub intrinsics: Intrinsics,
}

/// Projection parameters; pixel `(i, j)` has its center at `(i + 0.5, j + 0.5)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: Real,
    pub fy: Real,
    pub cx: Real,
    pub cy: Real,
    pub width: usize,
    pub height: usize,
    pub near: Real,
    pub far: Real,
}

impl Intrinsics {
    /// Symmetric frustum with vertical field of view `fov_y` (radians).
    pub fn from_fov(fov_y: Real, width: usize, height: usize, near: Real, far: Real) -> Self {
        let f = 0.5 * height as Real / (0.5 * fov_y).tan();
        Self { fx: f, fy: f, cx: 0.5 * width as Real, cy: 0.5 * height as Real, width, height, near, far }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Contract(format!("zero-area image {}x{}", self.width, self.height)));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Contract("focal lengths must be positive".into()));
        }
        if !(self.near > 0.0 && self.far > self.near) {
            return Err(Error::Contract(format!("need 0 < near < far, got {} and {}", self.near, self.far)));
        }
        Ok(())
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }
}

impl Camera {
    pub fn new(rotation: [Real; 4], translation: [Real; 3], intrinsics: Intrinsics) -> Result<Self> {
        let c = Self { rotation, translation, intrinsics };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        let n = self.rotation.iter().map(|v| v * v).sum::<Real>().sqrt();
        if !((n - 1.0).abs() < 1e-6) || !self.translation.iter().all(|v| v.is_finite()) {
            return Err(Error::Contract(format!("invalid camera pose (|q| = {n})")));
        }
        Ok(())
    }

    /// Camera looking from `eye` at `target`, with `up` pointing up in the image.
    pub fn look_at(eye: [Real; 3], target: [Real; 3], up: [Real; 3], intrinsics: Intrinsics) -> Result<Self> {
        let f = normalized(sub(target, eye))?;
        let r = normalized(cross(f, up))?;
        let d = cross(f, r);
        let m = [r, d, f];
        let t = [-dot(m[0], eye), -dot(m[1], eye), -dot(m[2], eye)];
        Self::new(matrix_to_quat(&m), t, intrinsics)
    }

    pub fn view_matrix(&self) -> Mat3 {
        quat_to_matrix(&self.rotation)
    }

    /// Camera center in world coordinates, `-R^T t`.
    pub fn center(&self) -> [Real; 3] {
        let r = self.view_matrix();
        let t = self.translation;
        std::array::from_fn(|j| -(0..3).map(|i| r[i][j] * t[i]).sum::<Real>())
    }

    pub fn world_to_view(&self, p: [Real; 3]) -> [Real; 3] {
        let r = self.view_matrix();
        std::array::from_fn(|i| dot(r[i], p) + self.translation[i])
    }
}

fn sub(a: [Real; 3], b: [Real; 3]) -> [Real; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [Real; 3], b: [Real; 3]) -> [Real; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn dot(a: [Real; 3], b: [Real; 3]) -> Real {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn normalized(a: [Real; 3]) -> Result<[Real; 3]> {
    let n = dot(a, a).sqrt();
    if n == 0.0 || !n.is_finite() {
        return Err(Error::Contract("degenerate look-at frame".into()));
    }
    Ok(a.map(|v| v / n))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn look_at_puts_target_on_axis() {
        let intr = Intrinsics::from_fov(0.8, 64, 48, 0.1, 10.0);
        let cam = Camera::look_at([1.0, 2.0, 3.0], [0.0, 0.5, 0.0], [0.0, 1.0, 0.0], intr).unwrap();
        let v = cam.world_to_view([0.0, 0.5, 0.0]);
        assert!(v[0].abs() < 1e-12 && v[1].abs() < 1e-12 && v[2] > 0.0);
        let c = cam.center();
        for (a, b) in c.iter().zip([1.0, 2.0, 3.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        // world up maps to image up (negative view y)
        let up = cam.world_to_view([0.0, 1.5, 0.0]);
        assert!(up[1] < 0.0);
    }

    #[test]
    fn invalid_intrinsics() {
        assert!(Intrinsics::from_fov(0.8, 0, 48, 0.1, 10.0).validate().is_err());
        assert!(Intrinsics::from_fov(0.8, 4, 4, 0.0, 10.0).validate().is_err());
        assert!(Intrinsics::from_fov(0.8, 4, 4, 1.0, 0.5).validate().is_err());
    }
}
