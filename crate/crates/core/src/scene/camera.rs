//! Pinhole camera with a world-from-camera rigid pose.
//!
//! Conventions: camera x right, y down, z forward (looking direction).
//! Continuous image coordinates span `[0, width] x [0, height]`; the ray of
//! integer pixel `(u, v)` passes through `(u + 0.5, v + 0.5)`. Depth values
//! are Euclidean distances along the (unit) ray from the camera center.

use super::SceneError;
use crate::geom::{Mat3, Vec3};

#[derive(Debug, Clone, Copy)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.dir * t
    }
}

/// A world point seen by a camera.
#[derive(Debug, Clone, Copy)]
pub struct ProjectedPoint {
    /// Continuous image coordinates.
    pub px: f64,
    pub py: f64,
    /// Euclidean distance from the camera center.
    pub ray_distance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    id: usize,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
    /// World-from-camera rotation; columns are the camera axes in world space.
    rotation: Mat3,
    position: Vec3,
}

impl Camera {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: usize,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        rotation: Mat3,
        position: Vec3,
    ) -> Result<Self, SceneError> {
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite()) {
            return Err(SceneError::InvalidCamera("fx and fy must be positive".into()));
        }
        if width == 0 || height == 0 {
            return Err(SceneError::InvalidCamera("image dimensions must be positive".into()));
        }
        if !rotation.is_rotation(1e-6) {
            return Err(SceneError::InvalidCamera(
                "rotation is not orthonormal with determinant +1".into(),
            ));
        }
        Ok(Camera { id, fx, fy, cx, cy, width, height, rotation, position })
    }

    /// Rotation looking from `position` toward `target`, world +z as up hint.
    pub fn look_at_rotation(position: Vec3, target: Vec3) -> Option<Mat3> {
        let forward = (target - position).normalized()?;
        let mut up = Vec3::new(0.0, 0.0, 1.0);
        if forward.cross(up).norm() < 1e-9 {
            up = Vec3::new(0.0, 1.0, 0.0);
        }
        let right = forward.cross(up).normalized()?;
        let down = forward.cross(right);
        Some(Mat3::from_cols(right, down, forward))
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn with_id(mut self, id: usize) -> Self {
        self.id = id;
        self
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn intrinsics(&self) -> (f64, f64, f64, f64) {
        (self.fx, self.fy, self.cx, self.cy)
    }

    pub fn rotation(&self) -> Mat3 {
        self.rotation
    }

    pub fn position(&self) -> Vec3 {
        self.position
    }

    /// Ray through continuous image coordinates.
    pub fn ray_through(&self, px: f64, py: f64) -> Result<Ray, SceneError> {
        let dir_cam = Vec3::new((px - self.cx) / self.fx, (py - self.cy) / self.fy, 1.0);
        let dir = self
            .rotation
            .mul_vec(dir_cam)
            .normalized()
            .ok_or_else(|| SceneError::InvalidCamera("degenerate ray direction".into()))?;
        Ok(Ray { origin: self.position, dir })
    }

    /// Ray through the center of integer pixel `(u, v)`.
    pub fn pixel_ray(&self, u: usize, v: usize) -> Result<Ray, SceneError> {
        if u >= self.width || v >= self.height {
            return Err(SceneError::PixelOutOfBounds(u, v));
        }
        self.ray_through(u as f64 + 0.5, v as f64 + 0.5)
    }

    /// Projects a world point; `None` when the point is behind the camera.
    pub fn project(&self, p: Vec3) -> Option<ProjectedPoint> {
        let q = self.rotation.transpose().mul_vec(p - self.position);
        if q.z <= 1e-12 {
            return None;
        }
        Some(ProjectedPoint {
            px: self.fx * q.x / q.z + self.cx,
            py: self.fy * q.y / q.z + self.cy,
            ray_distance: (p - self.position).norm(),
        })
    }

    /// Integer pixel containing continuous coordinates, if inside the image.
    pub fn pixel_of(&self, px: f64, py: f64) -> Option<(usize, usize)> {
        if px < 0.0 || py < 0.0 {
            return None;
        }
        let (u, v) = (px.floor() as usize, py.floor() as usize);
        (u < self.width && v < self.height).then_some((u, v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_camera() -> Camera {
        Camera::new(0, 100.0, 100.0, 32.0, 32.0, 64, 64, Mat3::identity(), Vec3::ZERO).unwrap()
    }

    #[test]
    fn center_pixel_ray_is_forward() {
        let cam = test_camera();
        let ray = cam.ray_through(32.0, 32.0).unwrap();
        assert!((ray.dir - Vec3::new(0.0, 0.0, 1.0)).norm() < 1e-12);
    }

    #[test]
    fn project_then_pixel_roundtrip() {
        let cam = test_camera();
        let p = Vec3::new(0.05, -0.02, 2.0);
        let proj = cam.project(p).unwrap();
        let ray = cam.ray_through(proj.px, proj.py).unwrap();
        let hit = ray.at(proj.ray_distance);
        assert!((hit - p).norm() < 1e-12);
    }

    #[test]
    fn behind_camera_does_not_project() {
        let cam = test_camera();
        assert!(cam.project(Vec3::new(0.0, 0.0, -1.0)).is_none());
    }

    #[test]
    fn rejects_bad_rotation() {
        let mut m = Mat3::identity();
        m.rows[0][0] = 0.9;
        let err = Camera::new(0, 100.0, 100.0, 32.0, 32.0, 64, 64, m, Vec3::ZERO);
        assert!(err.is_err());
    }
}
