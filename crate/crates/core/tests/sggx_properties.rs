mod support;

use std::f64::consts::PI;

use glam::DMat3;
use microflake_core::phase::phase_specular_eval;
use microflake_core::sggx::{build_sggx, MicroflakeParams, SggxMatrix};
use microflake_core::Vec3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use support::{chi_square_sphere, polar_quadrature};

fn random_unit(rng: &mut ChaCha8Rng) -> Vec3 {
    let z: f64 = rng.random_range(-1.0..1.0);
    let phi: f64 = rng.random_range(0.0..2.0 * PI);
    let r = (1.0 - z * z).sqrt();
    Vec3::new(r * phi.cos(), r * phi.sin(), z)
}

fn reflect(wi: Vec3, m: Vec3) -> Vec3 {
    2.0 * wi.dot(m) * m - wi
}

#[test]
fn specular_lobe_integrates_to_one_for_sharp_flakes() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..8 {
        let wm = random_unit(&mut rng);
        let tau = rng.random_range(0.05..0.3);
        let s = build_sggx(&MicroflakeParams::new(wm, tau).unwrap());
        let wi = random_unit(&mut rng);
        let total = polar_quadrature(reflect(wi, wm), 200, 100, |wl| phase_specular_eval(&s, wi, wl));
        assert!((total - 1.0).abs() < 0.01, "tau {tau}: {total}");
    }
}

#[test]
fn projected_area_matches_cosine_weighted_ndf() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..8 {
        let wm = random_unit(&mut rng);
        let s = build_sggx(&MicroflakeParams::new(wm, rng.random_range(0.05..1.0)).unwrap());
        let w = random_unit(&mut rng);
        let quad = polar_quadrature(wm, 200, 100, |m| w.dot(m).max(0.0) * s.ndf(m));
        assert!((quad - s.projected_area(w)).abs() < 1e-3, "{quad} vs {}", s.projected_area(w));
    }
}

#[test]
fn general_spd_projected_area() {
    // A fibre-like matrix with three distinct eigenvalues.
    let rot = DMat3::from_axis_angle(Vec3::new(1.0, -2.0, 0.5).normalize(), 0.8);
    let s = SggxMatrix::from_matrix(rot * DMat3::from_diagonal(Vec3::new(1.0, 0.5, 0.2)) * rot.transpose()).unwrap();
    let axis = rot * Vec3::X;
    for w in [Vec3::Z, Vec3::new(0.3, 0.9, -0.2).normalize(), axis] {
        let quad = polar_quadrature(axis, 200, 200, |m| w.dot(m).max(0.0) * s.ndf(m));
        assert!((quad - s.projected_area(w)).abs() < 1e-3);
    }
}

#[test]
fn visible_normals_follow_their_pdf() {
    let s = build_sggx(&MicroflakeParams::new(Vec3::new(0.2, 0.3, 0.9).normalize(), 0.25).unwrap());
    let wi = Vec3::new(0.6, -0.1, 0.5).normalize();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let samples: Vec<Vec3> = (0..50_000)
        .map(|_| s.sample_visible_normal(wi, [rng.random(), rng.random()]))
        .collect();
    let axis = Vec3::new(0.2, 0.3, 0.9).normalize();
    let p = chi_square_sphere(&samples, axis, 16, 32, |m| s.visible_ndf_pdf(wi, m));
    assert!(p > 0.01, "p = {p}");
}

#[test]
fn chi_square_rejects_a_wrong_pdf() {
    let s = build_sggx(&MicroflakeParams::new(Vec3::Z, 0.4).unwrap());
    let wrong = build_sggx(&MicroflakeParams::new(Vec3::Z, 0.5).unwrap());
    let wi = Vec3::new(0.5, 0.0, 0.8).normalize();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let samples: Vec<Vec3> = (0..50_000)
        .map(|_| s.sample_visible_normal(wi, [rng.random(), rng.random()]))
        .collect();
    let p = chi_square_sphere(&samples, Vec3::Z, 16, 32, |m| wrong.visible_ndf_pdf(wi, m));
    assert!(p < 1e-6, "p = {p}");
}

fn arb_unit() -> impl Strategy<Value = Vec3> {
    (-1.0f64..1.0, 0.0f64..(2.0 * PI)).prop_map(|(z, phi)| {
        let r = (1.0 - z * z).sqrt();
        Vec3::new(r * phi.cos(), r * phi.sin(), z)
    })
}

proptest! {
    #[test]
    fn ndf_is_positive_and_even(wm in arb_unit(), tau in 0.05f64..1.0, w in arb_unit()) {
        let s = build_sggx(&MicroflakeParams::new(wm, tau).unwrap());
        let d = s.ndf(w);
        prop_assert!(d > 0.0 && d.is_finite());
        prop_assert!((d - s.ndf(-w)).abs() <= 1e-12 * d);
    }

    #[test]
    fn eigenvalues_are_tau_squared_twice_and_one(wm in arb_unit(), tau in 0.05f64..1.0) {
        let s = build_sggx(&MicroflakeParams::new(wm, tau).unwrap());
        let cols = s.s.to_cols_array();
        let m = nalgebra::Matrix3::from_column_slice(&cols);
        let mut ev: Vec<f64> = m.symmetric_eigenvalues().iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        prop_assert!((ev[0] - tau * tau).abs() < 1e-6);
        prop_assert!((ev[1] - tau * tau).abs() < 1e-6);
        prop_assert!((ev[2] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn projected_area_is_between_tau_and_one(wm in arb_unit(), tau in 0.05f64..1.0, w in arb_unit()) {
        let s = build_sggx(&MicroflakeParams::new(wm, tau).unwrap());
        let a = s.projected_area(w);
        prop_assert!(a >= tau - 1e-12 && a <= 1.0 + 1e-12);
    }

    #[test]
    fn specular_phase_is_reciprocal_up_to_projected_area(
        wm in arb_unit(), tau in 0.05f64..1.0, wi in arb_unit(), wl in arb_unit()
    ) {
        // σ(ω_i) f(ω_i, ω_l) = σ(ω_l) f(ω_l, ω_i)
        let s = build_sggx(&MicroflakeParams::new(wm, tau).unwrap());
        let a = s.projected_area(wi) * phase_specular_eval(&s, wi, wl);
        let b = s.projected_area(wl) * phase_specular_eval(&s, wl, wi);
        prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
    }
}
