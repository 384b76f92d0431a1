//! Diffuse and specular microflake phase functions.
//!
//! Both take `omega_i` (toward the viewer) and `omega_l` (toward the light).
//! The angle brackets of the microflake integrals are clamped dot products,
//! integrated over the full sphere.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{fibonacci_sphere, onb_unit, Vec3, INV_PI};
use crate::sggx::SggxMatrix;

/// Quadrature size used when a diffuse pdf is needed without an explicit node count.
pub const DEFAULT_DIFFUSE_NODES: usize = 4096;
/// Degenerate-reflection retries before a specular sample contributes nothing.
pub const MAX_SAMPLE_ATTEMPTS: usize = 8;

/// Scale factors on the diffuse and specular radiance terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseWeights {
    pub w_diffuse: f64,
    pub w_specular: f64,
}

impl Default for PhaseWeights {
    fn default() -> Self {
        Self {
            w_diffuse: 1.0,
            w_specular: 1.0,
        }
    }
}

impl PhaseWeights {
    pub fn new(w_diffuse: f64, w_specular: f64) -> Result<Self> {
        let ok = |w: f64| w.is_finite() && w >= 0.0;
        if !ok(w_diffuse) || !ok(w_specular) {
            return Err(Error::Config(format!(
                "phase weights must be finite and non-negative, got ({w_diffuse}, {w_specular})"
            )));
        }
        Ok(Self {
            w_diffuse,
            w_specular,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LobeKind {
    Diffuse,
    Specular,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhaseSample {
    pub omega_l: Vec3,
    pub pdf: f64,
}

/// A sampled reflection fell below the microflake; the caller must draw fresh uniforms.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Resample;

/// `f_s = D(ω_h) / (4 σ(ω_i))`, zero when the half vector is undefined.
pub fn phase_specular_eval(s: &SggxMatrix, omega_i: Vec3, omega_l: Vec3) -> f64 {
    let h = omega_i + omega_l;
    let len = h.length();
    if len < 1e-12 {
        return 0.0;
    }
    s.ndf(h / len) / (4.0 * s.projected_area(omega_i))
}

/// `f_d = 1/(π σ(ω_i)) ∫ ⟨ω_l·m⟩⁺ ⟨ω_i·m⟩⁺ D(m) dm` by Fibonacci quadrature.
pub fn phase_diffuse_eval(s: &SggxMatrix, omega_i: Vec3, omega_l: Vec3, nodes: usize) -> Result<f64> {
    if nodes < 16 {
        return Err(Error::Config(format!("diffuse phase quadrature needs at least 16 nodes, got {nodes}")));
    }
    let w = 4.0 * PI / nodes as f64;
    let integral: f64 = fibonacci_sphere(nodes)
        .into_iter()
        .map(|m| {
            let a = omega_l.dot(m);
            let b = omega_i.dot(m);
            if a > 0.0 && b > 0.0 {
                a * b * s.ndf(m)
            } else {
                0.0
            }
        })
        .sum();
    Ok(integral * w * INV_PI / s.projected_area(omega_i))
}

/// One-sample estimator of the diffuse phase: draw a visible normal and
/// return `⟨ω_l·m⟩⁺ / π`.
pub fn phase_diffuse_estimate(s: &SggxMatrix, omega_i: Vec3, omega_l: Vec3, u: [f64; 2]) -> f64 {
    let m = s.sample_visible_normal(omega_i, u);
    omega_l.dot(m).max(0.0) * INV_PI
}

pub fn phase_combined_eval(
    s: &SggxMatrix,
    omega_i: Vec3,
    omega_l: Vec3,
    weights: PhaseWeights,
    nodes: usize,
) -> Result<f64> {
    let mut f = 0.0;
    if weights.w_diffuse != 0.0 {
        f += weights.w_diffuse * phase_diffuse_eval(s, omega_i, omega_l, nodes)?;
    }
    if weights.w_specular != 0.0 {
        f += weights.w_specular * phase_specular_eval(s, omega_i, omega_l);
    }
    Ok(f)
}

/// Importance-samples an outgoing light direction.
///
/// Specular: reflect `omega_i` about a visible normal; the pdf equals the
/// specular phase itself. Diffuse: cosine-sample about a visible normal; the
/// pdf is the diffuse phase, evaluated by quadrature.
pub fn sample_phase_direction(
    s: &SggxMatrix,
    omega_i: Vec3,
    kind: LobeKind,
    u: [f64; 3],
) -> std::result::Result<PhaseSample, Resample> {
    let m = s.sample_visible_normal(omega_i, [u[0], u[1]]);
    match kind {
        LobeKind::Specular => {
            let cos = omega_i.dot(m);
            let omega_l = (2.0 * cos * m - omega_i).normalize();
            let cos_l = omega_l.dot(m);
            if cos_l <= 1e-12 {
                return Err(Resample);
            }
            // D_wi(m) / (4 ⟨m·ω_l⟩)
            let pdf = s.visible_ndf_pdf(omega_i, m) / (4.0 * cos_l);
            if !(pdf > 0.0) || !pdf.is_finite() {
                return Err(Resample);
            }
            Ok(PhaseSample { omega_l, pdf })
        }
        LobeKind::Diffuse => {
            // u[2] drives both angles of the cosine lobe through a bit split,
            // so one extra uniform suffices.
            let (a, b) = split_uniform(u[2]);
            let r = a.sqrt();
            let phi = 2.0 * PI * b;
            let (tx, ty) = onb_unit(m);
            let omega_l =
                (r * phi.cos() * tx + r * phi.sin() * ty + (1.0 - a).max(0.0).sqrt() * m).normalize();
            let pdf = phase_diffuse_eval(s, omega_i, omega_l, DEFAULT_DIFFUSE_NODES).unwrap_or(0.0);
            if !(pdf > 0.0) {
                return Err(Resample);
            }
            Ok(PhaseSample { omega_l, pdf })
        }
    }
}

/// Like [`sample_phase_direction`], retrying up to [`MAX_SAMPLE_ATTEMPTS`]
/// times with uniforms from `next_u`. `None` means the sample contributes zero.
pub fn sample_phase_direction_retry(
    s: &SggxMatrix,
    omega_i: Vec3,
    kind: LobeKind,
    mut next_u: impl FnMut() -> [f64; 3],
) -> Option<PhaseSample> {
    (0..MAX_SAMPLE_ATTEMPTS).find_map(|_| sample_phase_direction(s, omega_i, kind, next_u()).ok())
}

/// Splits one uniform into two by de-interleaving the 52 mantissa bits.
fn split_uniform(u: f64) -> (f64, f64) {
    let bits = (u.clamp(0.0, 1.0 - f64::EPSILON) * (1u64 << 52) as f64) as u64;
    let (mut a, mut b) = (0u64, 0u64);
    for i in 0..26 {
        a |= ((bits >> (2 * i + 1)) & 1) << i;
        b |= ((bits >> (2 * i)) & 1) << i;
    }
    let scale = 1.0 / (1u64 << 26) as f64;
    ((a as f64 + 0.5) * scale, (b as f64 + 0.5) * scale)
}
