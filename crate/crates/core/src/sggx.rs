//! SGGX microflake distributions.
//!
//! A distribution is an ellipsoid given by a symmetric positive definite matrix
//! `S`. With a single roughness `τ` for both tangent axes it reduces to
//! `S = τ² I + (1 − τ²) ω_m ω_mᵀ`, which the renderer exploits through the
//! `*_axial` closed forms below.

use std::f64::consts::PI;

use glam::DMat3;

use crate::error::{Error, Result};
use crate::math::{onb_unit, Vec3};

/// Lower bound on roughness used by the appearance decoder. `D` is singular at `τ = 0`.
pub const TAU_MIN: f64 = 1e-3;

/// Microflake orientation and roughness at a point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MicroflakeParams {
    pub omega_m: Vec3,
    pub tau_m: f64,
}

impl MicroflakeParams {
    pub fn new(omega_m: Vec3, tau_m: f64) -> Result<Self> {
        if !omega_m.is_finite() || (omega_m.length() - 1.0).abs() > 1e-6 {
            return Err(Error::Domain(format!("omega_m must be unit length, got {omega_m}")));
        }
        if !(tau_m > 0.0 && tau_m <= 1.0) {
            return Err(Error::Domain(format!("tau_m must lie in (0, 1], got {tau_m}")));
        }
        Ok(Self { omega_m, tau_m })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SggxMatrix {
    pub s: DMat3,
    pub det_s: f64,
    pub inv_s: DMat3,
}

impl SggxMatrix {
    /// Wraps an arbitrary SPD matrix. Symmetry and positive-definiteness are checked.
    pub fn from_matrix(s: DMat3) -> Result<Self> {
        if !s.is_finite() {
            return Err(Error::Domain("non-finite SGGX matrix".into()));
        }
        let asym = (s - s.transpose()).to_cols_array().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if asym > 1e-9 {
            return Err(Error::Domain("SGGX matrix is not symmetric".into()));
        }
        // Sylvester's criterion on leading minors.
        let m1 = s.x_axis.x;
        let m2 = s.x_axis.x * s.y_axis.y - s.x_axis.y * s.y_axis.x;
        let det_s = s.determinant();
        if !(m1 > 0.0 && m2 > 0.0 && det_s > 0.0) {
            return Err(Error::Domain("SGGX matrix is not positive definite".into()));
        }
        Ok(Self {
            s,
            det_s,
            inv_s: s.inverse(),
        })
    }

    /// Identity matrix: the isotropic (spherical) distribution.
    pub fn isotropic() -> Self {
        Self {
            s: DMat3::IDENTITY,
            det_s: 1.0,
            inv_s: DMat3::IDENTITY,
        }
    }

    /// `D(ω) = 1 / (π √|S| (ωᵀ S⁻¹ ω)²)`.
    #[inline]
    pub fn ndf(&self, omega: Vec3) -> f64 {
        let q = omega.dot(self.inv_s * omega);
        1.0 / (PI * self.det_s.sqrt() * q * q)
    }

    /// Projected area of the ellipsoid seen from `omega`: `√(ωᵀ S ω)`.
    #[inline]
    pub fn projected_area(&self, omega: Vec3) -> f64 {
        omega.dot(self.s * omega).max(0.0).sqrt()
    }

    /// Density of visible normals `⟨ω_i·m⟩⁺ D(m) / σ(ω_i)`.
    pub fn visible_ndf_pdf(&self, omega_i: Vec3, m: Vec3) -> f64 {
        let cos = omega_i.dot(m);
        if cos <= 0.0 {
            return 0.0;
        }
        cos * self.ndf(m) / self.projected_area(omega_i)
    }

    /// Draws a normal from the visible NDF as seen from `omega_i`.
    ///
    /// Uniform disk sample lifted onto the projected ellipsoid, expressed in a
    /// frame whose third axis is `omega_i`. Deterministic in `u`.
    pub fn sample_visible_normal(&self, omega_i: Vec3, u: [f64; 2]) -> Vec3 {
        let u1 = u[0].clamp(0.0, 1.0 - 1e-12);
        let u2 = u[1].clamp(0.0, 1.0);
        let r = u1.sqrt();
        let phi = 2.0 * PI * u2;
        let (su, sv) = (r * phi.cos(), r * phi.sin());
        let sw = (1.0 - su * su - sv * sv).max(0.0).sqrt();

        let wi = omega_i;
        let (wk, wj) = onb_unit(wi);
        let s = &self.s;
        let s_kk = wk.dot(*s * wk);
        let s_jj = wj.dot(*s * wj);
        let s_ii = wi.dot(*s * wi);
        let s_kj = wk.dot(*s * wj);
        let s_ki = wk.dot(*s * wi);
        let s_ji = wj.dot(*s * wi);

        let sqrt_det_kji = (s_kk * s_jj * s_ii - s_kj * s_kj * s_ii - s_ki * s_ki * s_jj
            - s_ji * s_ji * s_kk
            + 2.0 * s_kj * s_ki * s_ji)
            .abs()
            .sqrt();
        let inv_sqrt_s_ii = 1.0 / s_ii.sqrt();
        let tmp = (s_jj * s_ii - s_ji * s_ji).max(1e-300).sqrt();
        let mk = Vec3::new(sqrt_det_kji / tmp, 0.0, 0.0);
        let mj = Vec3::new(
            -inv_sqrt_s_ii * (s_ki * s_ji - s_kj * s_ii) / tmp,
            inv_sqrt_s_ii * tmp,
            0.0,
        );
        let mi = Vec3::new(inv_sqrt_s_ii * s_ki, inv_sqrt_s_ii * s_ji, inv_sqrt_s_ii * s_ii);
        let m = (su * mk + sv * mj + sw * mi).normalize();
        m.x * wk + m.y * wj + m.z * wi
    }
}

/// `S = B · diag(τ², τ², 1) · Bᵀ` with `B = (ω_x, ω_y, ω_m)`.
pub fn build_sggx(p: &MicroflakeParams) -> SggxMatrix {
    let (x, y) = onb_unit(p.omega_m);
    let basis = DMat3::from_cols(x, y, p.omega_m);
    let t2 = p.tau_m * p.tau_m;
    let s = basis * DMat3::from_diagonal(Vec3::new(t2, t2, 1.0)) * basis.transpose();
    let inv = basis * DMat3::from_diagonal(Vec3::new(1.0 / t2, 1.0 / t2, 1.0)) * basis.transpose();
    SggxMatrix {
        s,
        det_s: t2 * t2,
        inv_s: inv,
    }
}

pub fn ndf_eval(s: &SggxMatrix, omega: Vec3) -> Result<f64> {
    if !omega.is_finite() || !s.s.is_finite() {
        return Err(Error::Domain("non-finite NDF argument".into()));
    }
    Ok(s.ndf(omega))
}

pub fn projected_area(s: &SggxMatrix, omega: Vec3) -> f64 {
    s.projected_area(omega)
}

pub fn sample_visible_normal(s: &SggxMatrix, omega_i: Vec3, u: [f64; 2]) -> Vec3 {
    s.sample_visible_normal(omega_i, u)
}

/// NDF of an axial distribution as a function of `c = ω·ω_m`.
///
/// Returns `(D, ∂D/∂c, ∂D/∂τ)`.
#[inline]
pub fn ndf_axial(c: f64, tau: f64) -> (f64, f64, f64) {
    let t2 = tau * tau;
    let q = 1.0 - (1.0 - t2) * c * c;
    let inv_q = 1.0 / q;
    let d = t2 * inv_q * inv_q / PI;
    let dd_dc = 4.0 * t2 * (1.0 - t2) * c * inv_q * inv_q * inv_q / PI;
    let dd_dtau = 2.0 * tau * inv_q * inv_q / PI * (1.0 - 2.0 * t2 * c * c * inv_q);
    (d, dd_dc, dd_dtau)
}

/// Projected area `√(τ² + (1 − τ²) c²)` of an axial distribution with
/// `(σ, ∂σ/∂c, ∂σ/∂τ)`.
#[inline]
pub fn projected_area_axial(c: f64, tau: f64) -> (f64, f64, f64) {
    let t2 = tau * tau;
    let sigma = (t2 + (1.0 - t2) * c * c).sqrt();
    (sigma, (1.0 - t2) * c / sigma, tau * (1.0 - c * c) / sigma)
}
