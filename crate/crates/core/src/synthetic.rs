//! Ground-truth scenes for round-trip tests and demos.

use std::f64::consts::PI;
use std::str::FromStr;

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::field::{Aabb, AppearanceDecoder, VolumeGrid, APPEARANCE_DIM, DEFAULT_LATENT_DIM};
use crate::lighting::{EnvLight, SgLobe};
use crate::math::{fibonacci_sphere, Rgb, Vec3};
use crate::sggx::TAU_MIN;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Sphere,
    TwoMaterialBlob,
    OccluderSlab,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sphere" => Ok(Self::Sphere),
            "two-material-blob" => Ok(Self::TwoMaterialBlob),
            "occluder-slab" => Ok(Self::OccluderSlab),
            _ => Err(Error::Config(format!(
                "unknown preset '{s}' (expected sphere, two-material-blob or occluder-slab)"
            ))),
        }
    }
}

pub struct SyntheticScene {
    pub grid: VolumeGrid,
    pub decoder: AppearanceDecoder,
    pub env: EnvLight,
}

/// Raw density well inside objects.
const INSIDE_RAW: f64 = 4.0;
/// Raw density of empty space: thin enough to be skipped by the renderer.
const EMPTY_RAW: f64 = -16.0;
/// Raw density change per world unit across a boundary.
const EDGE_SLOPE: f64 = 60.0;

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Latent code that [`truth_decoder`] maps to `albedo` and `tau`.
pub fn appearance_code(albedo: Rgb, tau: f64, latent_dim: usize) -> Vec<f64> {
    let mut z = vec![0.0; latent_dim];
    z[0] = logit(albedo.x);
    z[1] = logit(albedo.y);
    z[2] = logit(albedo.z);
    z[3] = logit((tau - TAU_MIN) / (1.0 - TAU_MIN));
    z
}

/// Decoder passing the first four latent channels straight to the outputs.
pub fn truth_decoder(latent_dim: usize) -> AppearanceDecoder {
    let mut d = AppearanceDecoder::zeros(latent_dim);
    for r in 0..APPEARANCE_DIM {
        d.weights[r * latent_dim + r] = 1.0;
    }
    d
}

fn sky(sun: Vec3, sun_color: Rgb, sky_color: Rgb, lobes: usize, sharpness: f64, rotation: f64) -> EnvLight {
    let (s, c) = rotation.sin_cos();
    let lobes = fibonacci_sphere(lobes)
        .into_iter()
        .map(|a| {
            let axis = Vec3::new(c * a.x + s * a.z, a.y, -s * a.x + c * a.z);
            SgLobe {
                axis,
                sharpness,
                amplitude: sky_color + sun_color * axis.dot(sun.normalize()).max(0.0).powi(2),
            }
        })
        .collect();
    EnvLight::new(lobes).expect("valid lobes")
}

/// Training illumination: warm light from above-front, dim blue sky.
pub fn truth_env() -> EnvLight {
    sky(Vec3::new(0.3, 0.8, 0.5), Rgb::new(1.0, 0.9, 0.75), Rgb::new(0.18, 0.22, 0.28), 16, 5.0, 0.0)
}

/// Held-out illumination for relighting: different layout, colour and sun direction.
pub fn novel_env() -> EnvLight {
    sky(Vec3::new(-0.7, 0.4, -0.5), Rgb::new(0.6, 0.8, 1.1), Rgb::new(0.25, 0.2, 0.15), 12, 7.0, 0.4)
}

/// `n` cameras on a ring around the origin, alternating between two elevations.
pub fn ring_cameras(n: usize, resolution: usize, radius: f64) -> Result<Vec<Camera>> {
    (0..n)
        .map(|k| {
            let az = 2.0 * PI * k as f64 / n as f64;
            let el = if k % 2 == 0 { 35f64 } else { 5f64 }.to_radians();
            let eye = radius * Vec3::new(el.cos() * az.sin(), el.sin(), el.cos() * az.cos());
            Camera::look_at(eye, Vec3::ZERO, Vec3::Y, 1.4 * resolution as f64, [resolution; 2])
        })
        .collect()
}

/// Cameras between the ring positions, for held-out evaluation.
pub fn held_out_cameras(n: usize, resolution: usize, radius: f64) -> Result<Vec<Camera>> {
    (0..n)
        .map(|k| {
            let az = 2.0 * PI * (k as f64 + 0.5) / n as f64;
            let el = 20f64.to_radians();
            let eye = radius * Vec3::new(el.cos() * az.sin(), el.sin(), el.cos() * az.cos());
            Camera::look_at(eye, Vec3::ZERO, Vec3::Y, 1.4 * resolution as f64, [resolution; 2])
        })
        .collect()
}

/// Signed distance (negative inside), outward normal and material of a shape.
type Shape = dyn Fn(Vec3) -> (f64, Vec3, Rgb, f64);

fn build(resolution: usize, shape: &Shape) -> Result<VolumeGrid> {
    let mut grid = VolumeGrid::new([resolution; 3], Aabb::cube(1.0), DEFAULT_LATENT_DIM, EMPTY_RAW as f32)?;
    let kd = grid.latent_dim;
    for idx in 0..grid.voxel_count() {
        let x = grid.voxel_center(idx);
        let (dist, normal, albedo, tau) = shape(x);
        grid.raw_density[idx] = (-EDGE_SLOPE * dist).clamp(EMPTY_RAW, INSIDE_RAW) as f32;
        grid.raw_normal[3 * idx..3 * idx + 3].copy_from_slice(&normal.as_vec3().to_array());
        let z = appearance_code(albedo, tau, kd);
        for (dst, v) in grid.latent[idx * kd..(idx + 1) * kd].iter_mut().zip(z) {
            *dst = v as f32;
        }
    }
    grid.reproject_normals();
    Ok(grid)
}

fn radial(x: Vec3, centre: Vec3) -> Vec3 {
    let d = x - centre;
    if d.length() > 1e-9 {
        d.normalize()
    } else {
        Vec3::Y
    }
}

pub fn make_preset(preset: Preset, resolution: usize) -> Result<SyntheticScene> {
    if resolution < 4 {
        return Err(Error::Config(format!("preset resolution must be at least 4, got {resolution}")));
    }
    let grid = match preset {
        Preset::Sphere => build(resolution, &|x| {
            (x.length() - 0.6, radial(x, Vec3::ZERO), Rgb::new(0.8, 0.5, 0.3), 0.3)
        })?,
        Preset::TwoMaterialBlob => build(resolution, &|x| {
            let (a, b) = (Vec3::new(-0.3, 0.0, 0.0), Vec3::new(0.3, 0.0, 0.0));
            let (da, db) = ((x - a).length() - 0.45, (x - b).length() - 0.45);
            if da < db {
                (da, radial(x, a), Rgb::new(0.2, 0.4, 0.85), 0.2)
            } else {
                (db, radial(x, b), Rgb::new(0.85, 0.25, 0.2), 0.6)
            }
        })?,
        Preset::OccluderSlab => build(resolution, &|x| {
            let blob = (x - Vec3::new(0.0, -0.35, 0.0)).length() - 0.4;
            // Plate above the +x half of the blob, shading it from the overhead light.
            let q = (x - Vec3::new(0.45, 0.45, 0.0)).abs() - Vec3::new(0.45, 0.08, 0.8);
            let slab = q.max(Vec3::ZERO).length() + q.max_element().min(0.0);
            if blob < slab {
                (blob, radial(x, Vec3::new(0.0, -0.35, 0.0)), Rgb::new(0.75, 0.75, 0.7), 0.4)
            } else {
                (slab, Vec3::Y, Rgb::new(0.3, 0.3, 0.35), 0.5)
            }
        })?,
    };
    let env = match preset {
        Preset::OccluderSlab => sky(Vec3::Y, Rgb::splat(1.6), Rgb::splat(0.1), 16, 5.0, 0.0),
        _ => truth_env(),
    };
    Ok(SyntheticScene {
        decoder: truth_decoder(grid.latent_dim),
        grid,
        env,
    })
}
