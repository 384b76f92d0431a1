//! Small vector helpers shared by every module.

use std::f64::consts::PI;

use crate::error::{Error, Result};

pub type Vec3 = glam::DVec3;
/// Linear RGB triple. Shares the vector type so colour arithmetic is component-wise.
pub type Rgb = glam::DVec3;

pub const INV_PI: f64 = 1.0 / PI;

/// Orthonormal tangent frame `(x, y)` such that `(x, y, n)` is right-handed.
///
/// Uses the branchless construction of Duff et al., which stays continuous
/// everywhere except the unavoidable sign switch at `n.z = 0`.
pub fn build_onb(n: Vec3) -> Result<(Vec3, Vec3)> {
    let len = n.length();
    if !len.is_finite() || len < 1e-12 {
        return Err(Error::Domain(format!("cannot build a frame around {n}")));
    }
    let n = n / len;
    let sign = 1.0f64.copysign(n.z);
    let a = -1.0 / (sign + n.z);
    let b = n.x * n.y * a;
    let x = Vec3::new(1.0 + sign * n.x * n.x * a, sign * b, -sign * n.x);
    let y = Vec3::new(b, sign + n.y * n.y * a, -n.y);
    Ok((x, y))
}

/// Infallible variant for directions already known to be unit length.
#[inline]
pub(crate) fn onb_unit(n: Vec3) -> (Vec3, Vec3) {
    let sign = 1.0f64.copysign(n.z);
    let a = -1.0 / (sign + n.z);
    let b = n.x * n.y * a;
    (
        Vec3::new(1.0 + sign * n.x * n.x * a, sign * b, -sign * n.x),
        Vec3::new(b, sign + n.y * n.y * a, -n.y),
    )
}

/// Deterministic equal-area Fibonacci lattice on the unit sphere.
pub fn fibonacci_sphere(n: usize) -> Vec<Vec3> {
    let golden = PI * (1.0 + 5f64.sqrt());
    (0..n)
        .map(|i| {
            let t = i as f64 + 0.5;
            let z = 1.0 - 2.0 * t / n as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let phi = golden * t;
            Vec3::new(r * phi.cos(), r * phi.sin(), z)
        })
        .collect()
}

/// Equal-weight spherical quadrature: `4π/n · Σ f(ω_k)` over Fibonacci nodes.
pub fn sphere_quadrature(n: usize, mut f: impl FnMut(Vec3) -> f64) -> f64 {
    let w = 4.0 * PI / n as f64;
    fibonacci_sphere(n).into_iter().map(|d| f(d)).sum::<f64>() * w
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for positive arguments.
pub fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

#[inline]
pub fn luminance(c: Rgb) -> f64 {
    0.2126 * c.x + 0.7152 * c.y + 0.0722 * c.z
}

/// Component-wise sign, with 0 mapped to 0 (subgradient of |x|).
#[inline]
pub(crate) fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Gradient of `v/|v|` pulled back: returns `(I - n nᵀ) g / |v|`.
#[inline]
pub(crate) fn normalize_backward(n: Vec3, len: f64, g: Vec3) -> Vec3 {
    (g - n * n.dot(g)) / len
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn assert_frame(n: Vec3) {
        let (x, y) = build_onb(n).unwrap();
        let m = [x, y, n];
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((m[i].dot(m[j]) - expect).abs() < 1e-6, "gram[{i}][{j}]");
            }
        }
        assert!((x.cross(y) - n).length() < 1e-6);
    }

    #[test]
    fn onb_at_poles() {
        let (x, y) = build_onb(Vec3::Z).unwrap();
        assert_eq!(x.dot(y), 0.0);
        assert!((x.cross(y) - Vec3::Z).length() < 1e-12);
        assert_frame(Vec3::Z);
        assert_frame(-Vec3::Z);
        let (x, y) = build_onb(-Vec3::Z).unwrap();
        assert!(x.is_finite() && y.is_finite());
    }

    #[test]
    fn onb_rejects_zero() {
        assert!(matches!(build_onb(Vec3::ZERO), Err(Error::Domain(_))));
        assert!(build_onb(Vec3::new(f64::NAN, 0.0, 1.0)).is_err());
    }

    #[test]
    fn onb_near_pole_is_finite() {
        assert_frame(Vec3::new(1e-9, -1e-9, -1.0).normalize());
        assert_frame(Vec3::new(1e-9, 1e-9, 1.0).normalize());
    }

    proptest! {
        #[test]
        fn onb_gram_is_identity(x in -1.0f64..1.0, y in -1.0f64..1.0, z in -1.0f64..1.0) {
            let v = Vec3::new(x, y, z);
            prop_assume!(v.length() > 1e-3);
            assert_frame(v.normalize());
        }
    }

    #[test]
    fn fibonacci_nodes_integrate_polynomials() {
        // ∫ z² dω = 4π/3
        let i = sphere_quadrature(5000, |d| d.z * d.z);
        assert!((i - 4.0 * PI / 3.0).abs() < 1e-4);
        let area = sphere_quadrature(100, |_| 1.0);
        assert!((area - 4.0 * PI).abs() < 1e-12);
    }

    #[test]
    fn softplus_roundtrip() {
        for y in [1e-6, 0.1, 1.0, 12.0, 50.0] {
            assert!((softplus(softplus_inverse(y)) - y).abs() < 1e-9 * y.max(1.0));
        }
    }
}
