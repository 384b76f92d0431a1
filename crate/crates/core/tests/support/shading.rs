//! Closed-form diffuse shading against brute-force quadrature of the exact
//! visibility-weighted cosine integral.

use microflake_core::field::Aabb;
use microflake_core::lighting::{compute_visibility, diffuse_irradiance, fit_visibility_sg, DEFAULT_VISIBILITY_LOBES};
use microflake_core::math::fibonacci_sphere;
use microflake_core::{EnvLight, Rgb, SgLobe, Vec3, VolumeGrid};

use super::polar_quadrature;

pub struct Case {
    pub label: String,
    pub constant_light: bool,
    pub closed_form: f64,
    pub brute_force: f64,
}

impl Case {
    pub fn relative_error(&self) -> f64 {
        (self.closed_form - self.brute_force).abs() / self.brute_force
    }
}

/// Dense plate hanging over part of the upper hemisphere of the shading point.
fn occluder() -> VolumeGrid {
    let mut g = VolumeGrid::new([16; 3], Aabb::cube(1.0), 1, -20.0).unwrap();
    for idx in 0..g.voxel_count() {
        let c = g.voxel_center(idx);
        if c.y > 0.1 && c.y < 0.35 && c.x > 0.0 {
            g.raw_density[idx] = 8.0;
        }
    }
    g
}

fn exact(env: &EnvLight, grid: &VolumeGrid, x: Vec3, n: Vec3, step: f64) -> f64 {
    polar_quadrature(n, 120, 120, |w| {
        let cos = n.dot(w);
        if cos <= 0.0 {
            return 0.0;
        }
        let v = compute_visibility(grid, x, w, step).unwrap();
        let l: f64 = env.lobes.iter().map(|l| l.amplitude.x * (l.sharpness * (w.dot(l.axis) - 1.0)).exp()).sum();
        l * v * cos
    })
}

fn closed_form(env: &EnvLight, grid: &VolumeGrid, x: Vec3, n: Vec3, step: f64) -> f64 {
    let samples: Vec<(Vec3, f64)> = fibonacci_sphere(64)
        .into_iter()
        .map(|w| (w, compute_visibility(grid, x, w, step).unwrap()))
        .collect();
    let lobes = fit_visibility_sg(&samples, DEFAULT_VISIBILITY_LOBES);
    diffuse_irradiance(n, &env.lobes, &lobes).x
}

fn lobe(axis: Vec3, sharpness: f64) -> SgLobe {
    SgLobe {
        axis: axis.normalize(),
        sharpness,
        amplitude: Rgb::ONE,
    }
}

pub fn cases() -> Vec<Case> {
    let grid = occluder();
    let step = 0.5 * grid.spacing().min_element();
    let x = Vec3::new(0.0, -0.4, 0.0);
    let mut out = Vec::new();
    let mut push = |label: String, constant_light: bool, env: EnvLight, n: Vec3| {
        out.push(Case {
            closed_form: closed_form(&env, &grid, x, n, step),
            brute_force: exact(&env, &grid, x, n, step),
            label,
            constant_light,
        });
    };
    let normals = [Vec3::Y, Vec3::new(0.4, 1.0, 0.0).normalize(), Vec3::new(-0.5, 1.0, 0.3).normalize()];
    for (i, n) in normals.iter().enumerate() {
        push(format!("constant light, normal {i}"), true, EnvLight::new(vec![lobe(Vec3::Y, 0.0)]).unwrap(), *n);
    }
    for sharpness in [2.0, 10.0, 25.0, 50.0] {
        for (i, axis) in [Vec3::new(-0.3, 1.0, 0.2), Vec3::new(-0.8, 0.9, -0.3), Vec3::new(0.2, 1.0, 0.6)].iter().enumerate() {
            let env = EnvLight::new(vec![lobe(*axis, sharpness), lobe(Vec3::Y, 1.0)]).unwrap();
            push(format!("lobe sharpness {sharpness}, axis {i}"), false, env, Vec3::Y);
        }
    }
    out
}
