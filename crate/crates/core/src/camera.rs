//! Pinhole camera.
//!
//! The camera looks down its local −z axis with +y up. Pixel `(u, v)` covers
//! `[u, u+1) × [v, v+1)` in continuous image coordinates, row 0 at the top.

use std::fs;
use std::path::Path;

use glam::DMat3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::write_atomic;
use crate::math::Vec3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    /// Unit length.
    pub direction: Vec3,
}

impl Ray {
    #[inline]
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + t * self.direction
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CameraFile", into = "CameraFile")]
pub struct Camera {
    /// World-from-camera rotation.
    pub rotation: DMat3,
    /// Camera centre in world space.
    pub position: Vec3,
    pub focal: f64,
    pub principal_point: [f64; 2],
    pub resolution: [usize; 2],
}

/// On-disk layout: `pose` is the 3×4 world-from-camera matrix `[R | t]`, row-major.
#[derive(Serialize, Deserialize)]
struct CameraFile {
    pose: [[f64; 4]; 3],
    focal: f64,
    principal_point: [f64; 2],
    resolution: [usize; 2],
}

impl TryFrom<CameraFile> for Camera {
    type Error = Error;

    fn try_from(f: CameraFile) -> Result<Self> {
        let p = f.pose;
        let rotation = DMat3::from_cols(
            Vec3::new(p[0][0], p[1][0], p[2][0]),
            Vec3::new(p[0][1], p[1][1], p[2][1]),
            Vec3::new(p[0][2], p[1][2], p[2][2]),
        );
        Camera::new(rotation, Vec3::new(p[0][3], p[1][3], p[2][3]), f.focal, f.principal_point, f.resolution)
    }
}

impl From<Camera> for CameraFile {
    fn from(c: Camera) -> Self {
        let r = c.rotation;
        let t = c.position;
        Self {
            pose: [
                [r.x_axis.x, r.y_axis.x, r.z_axis.x, t.x],
                [r.x_axis.y, r.y_axis.y, r.z_axis.y, t.y],
                [r.x_axis.z, r.y_axis.z, r.z_axis.z, t.z],
            ],
            focal: c.focal,
            principal_point: c.principal_point,
            resolution: c.resolution,
        }
    }
}

impl Camera {
    pub fn new(rotation: DMat3, position: Vec3, focal: f64, principal_point: [f64; 2], resolution: [usize; 2]) -> Result<Self> {
        if !(focal > 0.0) || !focal.is_finite() {
            return Err(Error::Config(format!("focal length must be positive, got {focal}")));
        }
        if resolution[0] == 0 || resolution[1] == 0 {
            return Err(Error::Config(format!("resolution must be positive, got {resolution:?}")));
        }
        if !position.is_finite() || !principal_point.iter().all(|v| v.is_finite()) {
            return Err(Error::Config("camera position and principal point must be finite".into()));
        }
        let gram = rotation.transpose() * rotation;
        let off = (gram - DMat3::IDENTITY).to_cols_array().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if !(off <= 1e-6) || !((rotation.determinant() - 1.0).abs() <= 1e-6) {
            return Err(Error::Config("camera pose is not a rotation".into()));
        }
        Ok(Self {
            rotation,
            position,
            focal,
            principal_point,
            resolution,
        })
    }

    /// Camera at `eye` looking at `target`, principal point at the image centre.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, focal: f64, resolution: [usize; 2]) -> Result<Self> {
        let back = (eye - target).normalize();
        let right = up.cross(back);
        if !(right.length() > 1e-9) {
            return Err(Error::Config("look_at: up is parallel to the view direction".into()));
        }
        let right = right.normalize();
        let true_up = back.cross(right);
        Self::new(
            DMat3::from_cols(right, true_up, back),
            eye,
            focal,
            [resolution[0] as f64 / 2.0, resolution[1] as f64 / 2.0],
            resolution,
        )
    }

    pub fn width(&self) -> usize {
        self.resolution[0]
    }

    pub fn height(&self) -> usize {
        self.resolution[1]
    }

    /// Ray through continuous image position `(x, y)`.
    #[inline]
    pub fn ray_through(&self, x: f64, y: f64) -> Ray {
        let local = Vec3::new(
            (x - self.principal_point[0]) / self.focal,
            -(y - self.principal_point[1]) / self.focal,
            -1.0,
        );
        Ray {
            origin: self.position,
            direction: (self.rotation * local).normalize(),
        }
    }

    /// Ray through pixel `(u, v)` at sub-pixel `offset` (`[0.5, 0.5]` is the centre).
    pub fn generate_ray(&self, pixel: [usize; 2], offset: [f64; 2]) -> Result<Ray> {
        if pixel[0] >= self.width() || pixel[1] >= self.height() {
            return Err(Error::Domain(format!("pixel {pixel:?} outside {:?}", self.resolution)));
        }
        Ok(self.ray_through(pixel[0] as f64 + offset[0], pixel[1] as f64 + offset[1]))
    }
}

pub fn generate_ray(camera: &Camera, pixel: [usize; 2], offset: [f64; 2]) -> Result<Ray> {
    camera.generate_ray(pixel, offset)
}

pub fn load_cameras(path: &Path) -> Result<Vec<Camera>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

pub fn save_cameras(cameras: &[Camera], path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(cameras).expect("cameras serialise");
    write_atomic(path, text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn tilted() -> Camera {
        Camera::look_at(Vec3::new(2.0, 1.0, 3.0), Vec3::new(0.1, -0.2, 0.0), Vec3::Y, 20.0, [16, 12]).unwrap()
    }

    #[test]
    fn principal_point_looks_down_minus_z() {
        let c = Camera::new(DMat3::IDENTITY, Vec3::ZERO, 10.0, [8.0, 6.0], [16, 12]).unwrap();
        assert_eq!(c.generate_ray([8, 6], [0.0, 0.0]).unwrap().direction, -Vec3::Z);
        let t = tilted();
        let r = t.ray_through(8.0, 6.0);
        assert_eq!(r.direction, -t.rotation.z_axis);
        assert_eq!(r.origin, t.position);
    }

    #[test]
    fn symmetric_pixels_mirror() {
        let c = Camera::new(DMat3::IDENTITY, Vec3::ZERO, 10.0, [8.0, 6.0], [16, 12]).unwrap();
        let a = c.generate_ray([2, 3], [0.5, 0.5]).unwrap().direction;
        let b = c.generate_ray([13, 8], [0.5, 0.5]).unwrap().direction;
        assert!((a.x + b.x).abs() < 1e-6 && (a.y + b.y).abs() < 1e-6 && (a.z - b.z).abs() < 1e-6);
        // row 0 is the top of the image
        assert!(a.y > 0.0);
    }

    #[test]
    fn corner_field_of_view() {
        let c = Camera::new(DMat3::IDENTITY, Vec3::ZERO, 25.0, [16.0, 16.0], [32, 32]).unwrap();
        let d = c.generate_ray([0, 16], [0.0, 0.0]).unwrap().direction;
        let half_fov = (0.5 * 32.0 / 25.0f64).atan();
        assert_relative_eq!(d.x.atan2(-d.z).abs(), half_fov, epsilon = 1e-12);
    }

    #[test]
    fn rejects_bad_cameras() {
        assert!(Camera::new(DMat3::IDENTITY, Vec3::ZERO, 0.0, [0.0; 2], [4, 4]).is_err());
        assert!(Camera::new(DMat3::from_diagonal(Vec3::new(1.0, 1.0, 1.1)), Vec3::ZERO, 1.0, [0.0; 2], [4, 4]).is_err());
        assert!(Camera::new(DMat3::from_diagonal(Vec3::new(1.0, 1.0, -1.0)), Vec3::ZERO, 1.0, [0.0; 2], [4, 4]).is_err());
        assert!(tilted().generate_ray([16, 0], [0.5, 0.5]).is_err());
    }

    #[test]
    fn json_round_trip() {
        let cams = vec![tilted(), Camera::new(DMat3::IDENTITY, Vec3::X, 3.0, [1.5, 2.5], [3, 5]).unwrap()];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cameras.json");
        save_cameras(&cams, &p).unwrap();
        assert_eq!(load_cameras(&p).unwrap(), cams);
    }
}
