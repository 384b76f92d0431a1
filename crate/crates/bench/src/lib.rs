//! Criterion benchmarks for the forward and backward paths.

use std::hint::black_box;

use criterion::Criterion;
use microflake_core::inverse::{backward, loss_photometric};
use microflake_core::lighting::VisibilityFitSettings;
use microflake_core::renderer::light_directions;
use microflake_core::synthetic::{make_preset, ring_cameras, Preset, SyntheticScene};
use microflake_core::{Camera, RenderSettings, Renderer, Rgb, VisibilityField};

struct Fixture {
    scene: SyntheticScene,
    settings: RenderSettings,
    visibility: VisibilityField,
    camera: Camera,
}

fn fixture(grid: usize, image: usize) -> Fixture {
    let scene = make_preset(Preset::TwoMaterialBlob, grid).expect("preset builds");
    let settings = RenderSettings::default();
    let visibility =
        VisibilityField::compute(&scene.grid, light_directions(&scene.env, &settings), &VisibilityFitSettings::default());
    let camera = ring_cameras(4, image, 3.0).expect("cameras")[0].clone();
    Fixture {
        scene,
        settings,
        visibility,
        camera,
    }
}

pub fn benchmarks(c: &mut Criterion) {
    let f = fixture(16, 32);
    let s = &f.scene;
    let r = Renderer::new(&s.grid, &s.decoder, &s.env, Some(&f.visibility), &f.settings).expect("renderer");

    c.bench_function("render_32x32", |b| b.iter(|| black_box(r.render(&f.camera))));

    let ray = f.camera.ray_through(16.5, 16.5);
    c.bench_function("march_centre_ray", |b| b.iter(|| black_box(r.march(black_box(&ray), 0, false))));

    let rays: Vec<_> = (0..128).map(|p| f.camera.ray_through((p % 32) as f64 + 0.5, (8 + p / 32) as f64 * 2.0)).collect();
    c.bench_function("backward_128_rays", |b| {
        b.iter(|| {
            let marches: Vec<_> = rays.iter().enumerate().map(|(i, ray)| r.march(ray, i as u64, true)).collect();
            let colors: Vec<Rgb> = marches.iter().map(|m| m.color).collect();
            let (_, d) = loss_photometric(&colors, &vec![Rgb::splat(0.2); colors.len()]).expect("loss");
            black_box(backward(&r, &marches, &d).expect("backward"))
        })
    });

    let mut group = c.benchmark_group("visibility");
    group.sample_size(10);
    group.bench_function("fit_16_cubed", |b| {
        b.iter(|| {
            black_box(VisibilityField::compute(
                &s.grid,
                light_directions(&s.env, &f.settings),
                &VisibilityFitSettings::default(),
            ))
        })
    });
    group.finish();
}
