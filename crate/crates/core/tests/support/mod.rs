//! Independent numerical oracles shared by the integration tests and the
//! acceptance suite. Nothing here calls into the library's own quadrature.

#![allow(dead_code)]

pub mod keystone;
pub mod shading;

use std::f64::consts::PI;

use microflake_core::Vec3;
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Gauss–Legendre nodes and weights on `[-1, 1]` by Newton iteration on `P_n`.
pub fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let p = if n == 0 { 1.0 } else { p1 };
            dp = n as f64 * (x * p - p0) / (x * x - 1.0);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        out.push((x, 2.0 / ((1.0 - x * x) * dp * dp)));
    }
    out
}

/// Orthonormal `(t, b)` completing `n`, built independently of the library.
pub fn frame(n: Vec3) -> (Vec3, Vec3) {
    let helper = if n.x.abs() < 0.9 { Vec3::X } else { Vec3::Y };
    let t = helper.cross(n).normalize();
    (t, n.cross(t))
}

/// `∫_{S²} f dω` in polar coordinates about `axis`, with `θ = π u²` so the
/// nodes cluster near the axis. `n_u · n_phi` evaluations.
pub fn polar_quadrature(axis: Vec3, n_u: usize, n_phi: usize, mut f: impl FnMut(Vec3) -> f64) -> f64 {
    let (t, b) = frame(axis);
    let gl = gauss_legendre(n_u);
    let dphi = 2.0 * PI / n_phi as f64;
    let mut total = 0.0;
    for &(x, w) in &gl {
        let u = 0.5 * (x + 1.0);
        let theta = PI * u * u;
        let jac = 0.5 * w * 2.0 * PI * u * theta.sin();
        let (st, ct) = theta.sin_cos();
        for j in 0..n_phi {
            let phi = (j as f64 + 0.5) * dphi;
            let d = st * phi.cos() * t + st * phi.sin() * b + ct * axis;
            total += jac * dphi * f(d);
        }
    }
    total
}

/// Pearson chi-square test of `samples` against `pdf` on `(u, φ)` bins about
/// `axis` (`θ = π u²`). Bins expecting fewer than 5 samples are pooled.
/// Returns the p-value.
pub fn chi_square_sphere(
    samples: &[Vec3],
    axis: Vec3,
    n_u: usize,
    n_phi: usize,
    pdf: impl Fn(Vec3) -> f64,
) -> f64 {
    let (t, b) = frame(axis);
    let mut observed = vec![0.0; n_u * n_phi];
    for s in samples {
        let theta = s.dot(axis).clamp(-1.0, 1.0).acos();
        let u = (theta / PI).sqrt();
        let phi = s.dot(b).atan2(s.dot(t)).rem_euclid(2.0 * PI);
        let i = ((u * n_u as f64) as usize).min(n_u - 1);
        let j = ((phi / (2.0 * PI) * n_phi as f64) as usize).min(n_phi - 1);
        observed[i * n_phi + j] += 1.0;
    }
    let gl = gauss_legendre(6);
    let n = samples.len() as f64;
    let (du, dphi) = (1.0 / n_u as f64, 2.0 * PI / n_phi as f64);
    let mut expected = vec![0.0; n_u * n_phi];
    for i in 0..n_u {
        for j in 0..n_phi {
            let mut mass = 0.0;
            for &(xu, wu) in &gl {
                let u = (i as f64 + 0.5 * (xu + 1.0)) * du;
                let theta = PI * u * u;
                let (st, ct) = theta.sin_cos();
                for &(xp, wp) in &gl {
                    let phi = (j as f64 + 0.5 * (xp + 1.0)) * dphi;
                    let d = st * phi.cos() * t + st * phi.sin() * b + ct * axis;
                    mass += 0.25 * wu * wp * du * dphi * 2.0 * PI * u * st * pdf(d);
                }
            }
            expected[i * n_phi + j] = mass * n;
        }
    }
    let mut chi2 = 0.0;
    let mut dof = 0usize;
    let (mut pooled_o, mut pooled_e) = (0.0, 0.0);
    for (o, e) in observed.iter().zip(&expected) {
        if *e < 5.0 {
            pooled_o += o;
            pooled_e += e;
        } else {
            chi2 += (o - e) * (o - e) / e;
            dof += 1;
        }
    }
    if pooled_e > 0.0 {
        chi2 += (pooled_o - pooled_e) * (pooled_o - pooled_e) / pooled_e;
        dof += 1;
    }
    let dist = ChiSquared::new((dof - 1) as f64).expect("positive degrees of freedom");
    1.0 - dist.cdf(chi2)
}

/// Central difference `(f(x + h) − f(x − h)) / 2h`.
pub fn central_difference(h: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
    (f(h) - f(-h)) / (2.0 * h)
}

/// Central differences at `h` and `2h` combined by Richardson extrapolation,
/// cancelling the O(h²) truncation term. `f` returns the loss and the
/// displacement actually applied, so rounded steps are divided out.
pub fn richardson_difference(h: f64, mut f: impl FnMut(f64) -> (f64, f64)) -> f64 {
    let mut span = |k: f64| {
        let (lp, xp) = f(k * h);
        let (lm, xm) = f(-k * h);
        (lp - lm) / (xp - xm)
    };
    let (d1, d2) = (span(1.0), span(2.0));
    (4.0 * d1 - d2) / 3.0
}

/// Gradient agreement: relative error below `rel`, or absolute error below `abs`.
pub fn gradients_agree(analytic: f64, numeric: f64, rel: f64, abs: f64) -> bool {
    let err = (analytic - numeric).abs();
    err <= abs || err <= rel * analytic.abs().max(numeric.abs())
}
