//! Finite-difference check of every parameter gradient of the photometric
//! loss on a small random scene.

use microflake_core::field::Aabb;
use microflake_core::inverse::{backward, loss_photometric};
use microflake_core::lighting::VisibilityFitSettings;
use microflake_core::renderer::light_directions;
use microflake_core::{
    AppearanceDecoder, Camera, EnvLight, RenderSettings, Renderer, Rgb, SgLobe, Vec3, VisibilityField, VolumeGrid,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};

use super::{gradients_agree, richardson_difference};

pub const GRID: usize = 4;
pub const IMAGE: usize = 8;
pub const LOBES: usize = 4;
const LATENT: usize = 3;
const STEP: f64 = 1e-3;

#[derive(Clone)]
struct Scene {
    grid: VolumeGrid,
    decoder: AppearanceDecoder,
    env: EnvLight,
}

fn unit(rng: &mut ChaCha8Rng) -> Vec3 {
    let v: [f64; 3] = UnitSphere.sample(rng);
    Vec3::from_array(v)
}

fn random_scene(rng: &mut ChaCha8Rng) -> Scene {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut grid = VolumeGrid::new([GRID; 3], Aabb::cube(1.0), LATENT, 0.0).unwrap();
    for v in &mut grid.raw_density {
        *v = rng.random_range(-2.0..2.0);
    }
    for v in &mut grid.raw_normal {
        *v = normal.sample(rng) as f32;
    }
    for v in &mut grid.latent {
        *v = normal.sample(rng) as f32;
    }
    let mut decoder = AppearanceDecoder::zeros(LATENT);
    for v in &mut decoder.weights {
        *v = 0.7 * normal.sample(rng);
    }
    for v in &mut decoder.bias {
        *v = 0.5 * normal.sample(rng);
    }
    let lobes = (0..LOBES)
        .map(|_| SgLobe {
            axis: unit(rng),
            sharpness: rng.random_range(1.0..10.0),
            amplitude: Rgb::new(rng.random_range(0.2..1.0), rng.random_range(0.2..1.0), rng.random_range(0.2..1.0)),
        })
        .collect();
    Scene {
        grid,
        decoder,
        env: EnvLight::new(lobes).unwrap(),
    }
}

fn settings() -> RenderSettings {
    RenderSettings {
        steps_per_ray: 24,
        exact: true,
        ..Default::default()
    }
}

fn render_loss(scene: &Scene, camera: &Camera, visibility: &VisibilityField, target: &[Rgb]) -> f64 {
    let s = settings();
    let r = Renderer::new(&scene.grid, &scene.decoder, &scene.env, Some(visibility), &s).unwrap();
    let colors: Vec<Rgb> = (0..IMAGE * IMAGE)
        .map(|p| r.march(&camera.ray_through((p % IMAGE) as f64 + 0.5, (p / IMAGE) as f64 + 0.5), p as u64, false).color)
        .collect();
    loss_photometric(&colors, target).unwrap().0
}

pub struct Report {
    pub checked: usize,
    pub failures: Vec<String>,
    /// Largest error relative to the gradient magnitude, over gradients above the absolute floor.
    pub worst_relative: f64,
}

/// Runs the check for one seed with the given tolerances.
pub fn check(seed: u64, rel: f64, abs: f64) -> Report {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = random_scene(&mut rng);
    let eye = 3.0 * Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(0.2..1.0), 1.0).normalize();
    let camera = Camera::look_at(eye, Vec3::ZERO, Vec3::Y, 1.6 * IMAGE as f64, [IMAGE; 2]).unwrap();
    let target: Vec<Rgb> = (0..IMAGE * IMAGE)
        .map(|_| Rgb::new(rng.random_range(0.0..0.5), rng.random_range(0.0..0.5), rng.random_range(0.0..0.5)))
        .collect();

    // Visibility is a stop-gradient input, so it stays fixed under perturbation.
    let s = settings();
    let visibility =
        VisibilityField::compute(&scene.grid, light_directions(&scene.env, &s), &VisibilityFitSettings::default());
    let renderer = Renderer::new(&scene.grid, &scene.decoder, &scene.env, Some(&visibility), &s).unwrap();
    let marches: Vec<_> = (0..IMAGE * IMAGE)
        .map(|p| renderer.march(&camera.ray_through((p % IMAGE) as f64 + 0.5, (p / IMAGE) as f64 + 0.5), p as u64, true))
        .collect();
    let colors: Vec<Rgb> = marches.iter().map(|m| m.color).collect();
    let (_, d_color) = loss_photometric(&colors, &target).unwrap();
    let grads = backward(&renderer, &marches, &d_color).unwrap();

    let mut report = Report {
        checked: 0,
        failures: Vec::new(),
        worst_relative: 0.0,
    };
    let mut compare = |name: String, analytic: f64, numeric: f64| {
        report.checked += 1;
        let err = (analytic - numeric).abs();
        let scale = analytic.abs().max(numeric.abs());
        if scale > abs {
            report.worst_relative = report.worst_relative.max(err / scale);
        }
        if !gradients_agree(analytic, numeric, rel, abs) {
            report.failures.push(format!("seed {seed} {name}: backward {analytic:e}, finite difference {numeric:e}"));
        }
    };
    let loss = |s: &Scene| render_loss(s, &camera, &visibility, &target);

    // f32 grid entries: divide by the step actually taken.
    let f32_fd = |get: &dyn Fn(&mut Scene) -> &mut f32| {
        let x0 = *get(&mut scene.clone());
        richardson_difference(STEP, |h| {
            let mut s = scene.clone();
            *get(&mut s) = x0 + h as f32;
            let dx = *get(&mut s) as f64 - x0 as f64;
            (loss(&s), dx)
        })
    };
    let nv = scene.grid.voxel_count();
    for i in 0..nv {
        compare(format!("raw_density[{i}]"), grads.raw_density[i], f32_fd(&|s| &mut s.grid.raw_density[i]));
    }
    for i in 0..3 * nv {
        compare(format!("raw_normal[{i}]"), grads.raw_normal[i], f32_fd(&|s| &mut s.grid.raw_normal[i]));
    }
    for i in 0..LATENT * nv {
        compare(format!("latent[{i}]"), grads.latent[i], f32_fd(&|s| &mut s.grid.latent[i]));
    }

    let f64_fd = |set: &dyn Fn(&mut Scene, f64)| {
        richardson_difference(STEP, |h| {
            let mut s = scene.clone();
            set(&mut s, h);
            (loss(&s), h)
        })
    };
    for i in 0..scene.decoder.weights.len() {
        compare(format!("decoder_weights[{i}]"), grads.decoder_weights[i], f64_fd(&|s, h| s.decoder.weights[i] += h));
    }
    for i in 0..4 {
        compare(format!("decoder_bias[{i}]"), grads.decoder_bias[i], f64_fd(&|s, h| s.decoder.bias[i] += h));
    }
    for j in 0..LOBES {
        compare(format!("light_sharpness[{j}]"), grads.light_sharpness[j], f64_fd(&|s, h| s.env.lobes[j].sharpness += h));
        for c in 0..3 {
            compare(
                format!("light_amplitude[{j}][{c}]"),
                grads.light_amplitude[j][c],
                f64_fd(&|s, h| s.env.lobes[j].amplitude[c] += h),
            );
        }
    }
    report
}
