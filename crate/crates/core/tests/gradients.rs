mod support;

use microflake_core::field::Aabb;
use microflake_core::inverse::{
    loss_density_normal, loss_smoothness, GradientBuffer, NormalLossSample, OrientationPenalty, SmoothnessSample,
};
use microflake_core::{AppearanceDecoder, EnvLight, Rgb, Vec3, VolumeGrid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use support::{gradients_agree, keystone};

#[test]
fn photometric_backward_matches_finite_differences() {
    for seed in [3, 17, 40] {
        let r = keystone::check(seed, 1e-3, 1e-6);
        assert!(r.checked > 400);
        assert!(r.failures.is_empty(), "{:#?}", r.failures);
    }
}

fn random_grid(rng: &mut ChaCha8Rng, latent: usize) -> VolumeGrid {
    let n = Normal::new(0.0, 1.0).unwrap();
    let mut g = VolumeGrid::new([6; 3], Aabb::cube(1.0), latent, 0.0).unwrap();
    for v in &mut g.raw_density {
        *v = rng.random_range(-3.0..3.0);
    }
    for v in g.raw_normal.iter_mut().chain(&mut g.latent) {
        *v = n.sample(rng) as f32;
    }
    g
}

fn fd_f32(grid: &VolumeGrid, h: f32, field: fn(&mut VolumeGrid) -> &mut Vec<f32>, i: usize, loss: &dyn Fn(&VolumeGrid) -> f64) -> f64 {
    let mut g = grid.clone();
    let x0 = field(&mut g)[i];
    field(&mut g)[i] = x0 + h;
    let xp = field(&mut g)[i] as f64;
    let lp = loss(&g);
    field(&mut g)[i] = x0 - h;
    let xm = field(&mut g)[i] as f64;
    let lm = loss(&g);
    (lp - lm) / (xp - xm)
}

#[test]
fn density_normal_loss_gradients_match_finite_differences() {
    for (seed, penalty) in [(1, OrientationPenalty::BackFacing), (2, OrientationPenalty::PaperLiteral)] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = random_grid(&mut rng, 2);
        let samples: Vec<NormalLossSample> = (0..12)
            .map(|_| NormalLossSample {
                position: Vec3::new(rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6)),
                weight: rng.random_range(0.1..1.0),
                omega_i: Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 1.0).normalize(),
            })
            .collect();
        let env = EnvLight::uniform(2, 1.0, Rgb::ONE).unwrap();
        let decoder = AppearanceDecoder::zeros(2);
        let mut grads = GradientBuffer::new(&grid, &decoder, &env, 2);
        let scale = 0.7;
        loss_density_normal(&grid, &samples, penalty, Some((&mut grads, scale)));
        let loss = |g: &VolumeGrid| scale * loss_density_normal(g, &samples, penalty, None);
        assert!(loss(&grid) > 0.0);
        let mut nonzero = 0;
        for i in 0..grid.voxel_count() {
            let fd = fd_f32(&grid, 1e-3, |g| &mut g.raw_density, i, &loss);
            assert!(gradients_agree(grads.raw_density[i], fd, 1e-3, 1e-6), "density {i}: {} vs {fd}", grads.raw_density[i]);
            nonzero += (fd.abs() > 1e-6) as usize;
        }
        assert!(nonzero > 10);
        for i in 0..3 * grid.voxel_count() {
            let fd = fd_f32(&grid, 1e-3, |g| &mut g.raw_normal, i, &loss);
            assert!(gradients_agree(grads.raw_normal[i], fd, 1e-3, 1e-6), "normal {i}: {} vs {fd}", grads.raw_normal[i]);
        }
    }
}

#[test]
fn smoothness_loss_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let kd = 3;
    let grid = random_grid(&mut rng, kd);
    let mut decoder = AppearanceDecoder::zeros(kd);
    for v in &mut decoder.weights {
        *v = rng.random_range(-1.0..1.0);
    }
    let samples: Vec<SmoothnessSample> = (0..10)
        .map(|_| SmoothnessSample {
            position: Vec3::new(rng.random_range(-0.7..0.7), rng.random_range(-0.7..0.7), rng.random_range(-0.7..0.7)),
            offset: Vec3::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2)),
            latent_offset: (0..kd).map(|_| rng.random_range(-0.5..0.5)).collect(),
        })
        .collect();
    let env = EnvLight::uniform(2, 1.0, Rgb::ONE).unwrap();
    let mut grads = GradientBuffer::new(&grid, &decoder, &env, 2);
    loss_smoothness(&grid, &decoder, &samples, Some((&mut grads, 1.0)));

    let loss = |g: &VolumeGrid| loss_smoothness(g, &decoder, &samples, None);
    for i in 0..3 * grid.voxel_count() {
        let fd = fd_f32(&grid, 1e-4, |g| &mut g.raw_normal, i, &loss);
        assert!(gradients_agree(grads.raw_normal[i], fd, 1e-3, 1e-6), "normal {i}: {} vs {fd}", grads.raw_normal[i]);
    }
    for i in 0..kd * grid.voxel_count() {
        let fd = fd_f32(&grid, 1e-4, |g| &mut g.latent, i, &loss);
        assert!(gradients_agree(grads.latent[i], fd, 1e-3, 1e-6), "latent {i}: {} vs {fd}", grads.latent[i]);
    }
    for i in 0..decoder.weights.len() {
        let fd = support::central_difference(1e-5, |h| {
            let mut d = decoder.clone();
            d.weights[i] += h;
            loss_smoothness(&grid, &d, &samples, None)
        });
        assert!(gradients_agree(grads.decoder_weights[i], fd, 1e-3, 1e-6), "weight {i}: {} vs {fd}", grads.decoder_weights[i]);
    }
}
