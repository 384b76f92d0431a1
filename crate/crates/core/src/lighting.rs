//! Spherical-Gaussian environment light, directional visibility and the
//! visibility-aware diffuse term.
//!
//! A lobe is `μ exp(λ (ω·ξ − 1))`. Products of lobes are lobes again, so the
//! diffuse integral of (visibility × light × clamped cosine) has the closed form
//! `μ_v μ_l μ_c · 4π e^{−Σλ} sinh(m)/m` with `m = |Σ λ ξ|`.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::{write_atomic, VolumeGrid};
use crate::math::{fibonacci_sphere, softplus, Rgb, Vec3, INV_PI};

/// Amplitude of the single-lobe clamped-cosine fit.
pub const COS_SG_AMPLITUDE: f64 = 1.08;
/// Sharpness of the clamped-cosine fit, chosen so the lobe integrates to exactly π.
pub const COS_SG_SHARPNESS: f64 = 2.129_463_050_816_361;

pub const DEFAULT_VISIBILITY_SAMPLES: usize = 64;
pub const DEFAULT_VISIBILITY_LOBES: usize = 4;

/// Light lobe with an RGB amplitude.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgLobe {
    pub axis: Vec3,
    pub sharpness: f64,
    pub amplitude: Rgb,
}

impl SgLobe {
    #[inline]
    pub fn eval(&self, omega: Vec3) -> Rgb {
        self.amplitude * (self.sharpness * (omega.dot(self.axis) - 1.0)).exp()
    }
}

/// Single-channel lobe, used for visibility.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct VisibilityLobe {
    pub axis: Vec3,
    pub sharpness: f64,
    pub amplitude: f64,
}

impl VisibilityLobe {
    pub fn constant(amplitude: f64) -> Self {
        Self {
            axis: Vec3::Z,
            sharpness: 0.0,
            amplitude,
        }
    }

    #[inline]
    pub fn eval(&self, omega: Vec3) -> f64 {
        self.amplitude * (self.sharpness * (omega.dot(self.axis) - 1.0)).exp()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvLight {
    pub lobes: Vec<SgLobe>,
}

impl EnvLight {
    pub fn new(lobes: Vec<SgLobe>) -> Result<Self> {
        if lobes.is_empty() {
            return Err(Error::Config("environment light needs at least one lobe".into()));
        }
        for (i, l) in lobes.iter().enumerate() {
            if !l.axis.is_finite() || (l.axis.length() - 1.0).abs() > 1e-6 {
                return Err(Error::Config(format!("lobe {i}: axis {} is not unit length", l.axis)));
            }
            if !l.sharpness.is_finite() || l.sharpness < 0.0 {
                return Err(Error::Config(format!("lobe {i}: sharpness {} must be finite and >= 0", l.sharpness)));
            }
            if !l.amplitude.is_finite() || l.amplitude.min_element() < 0.0 {
                return Err(Error::Config(format!("lobe {i}: amplitude {} must be finite and >= 0", l.amplitude)));
            }
        }
        Ok(Self { lobes })
    }

    /// `n` lobes on a Fibonacci layout, all with the same sharpness and amplitude.
    pub fn uniform(n: usize, sharpness: f64, amplitude: Rgb) -> Result<Self> {
        Self::new(
            fibonacci_sphere(n)
                .into_iter()
                .map(|axis| SgLobe {
                    axis,
                    sharpness,
                    amplitude,
                })
                .collect(),
        )
    }

    #[inline]
    pub fn eval(&self, omega: Vec3) -> Rgb {
        self.lobes.iter().map(|l| l.eval(omega)).sum()
    }

    pub fn axes(&self) -> Vec<Vec3> {
        self.lobes.iter().map(|l| l.axis).collect()
    }
}

/// `Σ_j μ_j exp(λ_j (ω·ξ_j − 1))`.
pub fn env_eval(env: &EnvLight, omega: Vec3) -> Rgb {
    env.eval(omega)
}

/// `4π e^{−s} sinh(m)/m` and its scaled slope `(∂/∂m)/m`, for `0 ≤ m ≤ s`.
///
/// This is the integral over the sphere of a product of lobes whose
/// sharpnesses sum to `s` and whose weighted axes sum to a vector of length `m`.
#[inline]
pub(crate) fn sg_product_kernel(m: f64, s: f64) -> (f64, f64) {
    if m < 1e-2 {
        let e = (-s).exp() * 4.0 * PI;
        let m2 = m * m;
        (e * (1.0 + m2 / 6.0 + m2 * m2 / 120.0), e * (1.0 / 3.0 + m2 / 30.0 + m2 * m2 / 840.0))
    } else {
        let ep = (m - s).exp();
        let em = (-m - s).exp();
        let sinh = 0.5 * (ep - em);
        let cosh = 0.5 * (ep + em);
        (4.0 * PI * sinh / m, 4.0 * PI * (m * cosh - sinh) / (m * m * m))
    }
}

#[inline]
fn unit_product_integral(a: Vec3, la: f64, b: Vec3, lb: f64) -> f64 {
    sg_product_kernel((la * a + lb * b).length(), la + lb).0
}

/// `∫ G_a G_b dω` per colour channel.
pub fn sg_inner_product(a: &SgLobe, b: &SgLobe) -> Rgb {
    a.amplitude * b.amplitude * unit_product_integral(a.axis, a.sharpness, b.axis, b.sharpness)
}

pub fn sg_inner_product_scalar(a: &VisibilityLobe, b: &VisibilityLobe) -> f64 {
    a.amplitude * b.amplitude * unit_product_integral(a.axis, a.sharpness, b.axis, b.sharpness)
}

/// Single lobe approximating `max(0, ω·n)`.
pub fn cosine_sg_approx(normal: Vec3) -> SgLobe {
    SgLobe {
        axis: normal,
        sharpness: COS_SG_SHARPNESS,
        amplitude: Rgb::splat(COS_SG_AMPLITUDE),
    }
}

/// `E(n) = Σ_v Σ_l ∫ V_v L_l cos_n dω`.
pub fn diffuse_irradiance(normal: Vec3, light: &[SgLobe], vis: &[VisibilityLobe]) -> Rgb {
    let lc = COS_SG_SHARPNESS;
    let cn = lc * normal;
    let mut e = Rgb::ZERO;
    for v in vis {
        if v.amplitude == 0.0 {
            continue;
        }
        let base = v.sharpness * v.axis + cn;
        let s_base = v.sharpness + lc;
        let mut acc = Rgb::ZERO;
        for l in light {
            let m = (base + l.sharpness * l.axis).length();
            acc += l.amplitude * sg_product_kernel(m, s_base + l.sharpness).0;
        }
        e += v.amplitude * acc;
    }
    e * COS_SG_AMPLITUDE
}

/// Adjoint of [`diffuse_irradiance`] for an upstream gradient `d_e`.
///
/// Accumulates into `d_normal`, `d_sharpness[l]` and `d_amplitude[l]`.
pub fn diffuse_irradiance_backward(
    normal: Vec3,
    light: &[SgLobe],
    vis: &[VisibilityLobe],
    d_e: Rgb,
    d_normal: &mut Vec3,
    d_sharpness: &mut [f64],
    d_amplitude: &mut [Rgb],
) {
    let lc = COS_SG_SHARPNESS;
    let cn = lc * normal;
    for v in vis {
        if v.amplitude == 0.0 {
            continue;
        }
        let scale = v.amplitude * COS_SG_AMPLITUDE;
        let base = v.sharpness * v.axis + cn;
        let s_base = v.sharpness + lc;
        for (j, l) in light.iter().enumerate() {
            let u = base + l.sharpness * l.axis;
            let (k, k1) = sg_product_kernel(u.length(), s_base + l.sharpness);
            d_amplitude[j] += d_e * (scale * k);
            // ∂K/∂u = K1 · u, ∂K/∂s = −K
            let dk = scale * d_e.dot(l.amplitude);
            let du = dk * k1 * u;
            *d_normal += lc * du;
            d_sharpness[j] += du.dot(l.axis) - dk * k;
        }
    }
}

/// `(a/π) E(n)`: the visibility-aware diffuse term.
pub fn diffuse_shade(albedo: Rgb, omega_m: Vec3, env: &EnvLight, vis: &[VisibilityLobe]) -> Rgb {
    albedo * INV_PI * diffuse_irradiance(omega_m, &env.lobes, vis)
}

/// Transmittance from `x` to the grid boundary along `omega`.
pub fn compute_visibility(grid: &VolumeGrid, x: Vec3, omega: Vec3, step: f64) -> Result<f64> {
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::Config(format!("visibility step must be positive, got {step}")));
    }
    Ok(march_transmittance(grid, x, omega, step))
}

pub(crate) fn march_transmittance(grid: &VolumeGrid, x: Vec3, omega: Vec3, step: f64) -> f64 {
    let Some((_, t_far)) = grid.bounds.intersect(x, omega) else {
        return 1.0;
    };
    let n = (t_far / step).ceil().max(1.0) as usize;
    let dt = t_far / n as f64;
    let mut tau = 0.0;
    for k in 0..n {
        let p = x + omega * ((k as f64 + 0.5) * dt);
        if let Some(c) = grid.corners(p) {
            tau += softplus(grid.interp_raw_density(&c)) * dt;
        }
    }
    (-tau).exp()
}

/// Least-squares visibility fit over a fixed set of sample directions.
///
/// Orthogonal matching pursuit over a dictionary of lobes centred on the
/// sample directions at a few sharpnesses plus a constant atom, with a
/// non-negativity constraint on the selected amplitudes.
pub struct VisibilityFitter {
    directions: Vec<Vec3>,
    atoms: Vec<VisibilityLobe>,
    /// Row per atom, evaluated at every direction, pre-normalised.
    basis: Vec<Vec<f64>>,
    norms: Vec<f64>,
    spread: bool,
}

const FIT_SHARPNESS: [f64; 4] = [1.0, 2.5, 6.0, 15.0];

impl VisibilityFitter {
    pub fn new(directions: Vec<Vec3>) -> Self {
        let mut atoms = vec![VisibilityLobe::constant(1.0)];
        for &d in &directions {
            for &l in &FIT_SHARPNESS {
                atoms.push(VisibilityLobe {
                    axis: d,
                    sharpness: l,
                    amplitude: 1.0,
                });
            }
        }
        let basis: Vec<Vec<f64>> = atoms.iter().map(|a| directions.iter().map(|&d| a.eval(d)).collect()).collect();
        let norms = basis.iter().map(|b| b.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
        // Directions must not all lie in a plane through the origin or a cone.
        let scatter = directions.iter().fold(glam::DMat3::ZERO, |m, d| {
            m + glam::DMat3::from_cols(*d * d.x, *d * d.y, *d * d.z)
        });
        let spread = directions.len() >= 4 && scatter.determinant() / (directions.len() as f64).powi(3) > 1e-4;
        Self {
            directions,
            atoms,
            basis,
            norms,
            spread,
        }
    }

    pub fn directions(&self) -> &[Vec3] {
        &self.directions
    }

    /// Fits `k` lobes to visibility values sampled at [`Self::directions`].
    pub fn fit(&self, values: &[f64], k: usize) -> Vec<VisibilityLobe> {
        assert_eq!(values.len(), self.directions.len());
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let constant = || {
            let mut out = vec![VisibilityLobe::default(); k.max(1)];
            out[0] = VisibilityLobe::constant(mean.clamp(0.0, 1.0));
            out
        };
        if k == 0 || values.len() < 4 * k || !self.spread || hi - lo < 1e-3 {
            return constant();
        }

        let mut selected: Vec<usize> = Vec::with_capacity(k);
        let mut coef: Vec<f64> = Vec::new();
        let mut residual = values.to_vec();
        for _ in 0..k {
            let best = (0..self.atoms.len())
                .filter(|a| !selected.contains(a))
                .map(|a| {
                    let c = self.basis[a].iter().zip(&residual).map(|(b, r)| b * r).sum::<f64>() / self.norms[a];
                    (a, c)
                })
                .filter(|&(_, c)| c > 1e-9)
                .max_by(|x, y| x.1.total_cmp(&y.1));
            let Some((a, _)) = best else { break };
            selected.push(a);
            match self.nonneg_least_squares(&mut selected, values) {
                Some(c) => coef = c,
                None => return constant(),
            }
            residual = values.to_vec();
            for (&a, &c) in selected.iter().zip(&coef) {
                for (r, b) in residual.iter_mut().zip(&self.basis[a]) {
                    *r -= c * b;
                }
            }
        }
        if selected.is_empty() {
            return constant();
        }
        let start: Vec<VisibilityLobe> = selected
            .iter()
            .zip(&coef)
            .map(|(&a, &c)| VisibilityLobe {
                amplitude: c,
                ..self.atoms[a]
            })
            .collect();
        let mut out: Vec<VisibilityLobe> = self
            .refine(start, values)
            .into_iter()
            .map(|l| VisibilityLobe {
                amplitude: l.amplitude.clamp(0.0, 1.0),
                ..l
            })
            .collect();
        out.resize(k, VisibilityLobe::default());
        out
    }

    fn residual(&self, lobes: &[VisibilityLobe], values: &[f64]) -> f64 {
        self.directions
            .iter()
            .zip(values)
            .map(|(&d, v)| (lobes.iter().map(|l| l.eval(d)).sum::<f64>() - v).powi(2))
            .sum()
    }

    /// Levenberg-Marquardt on axes, sharpnesses and amplitudes of the
    /// greedily selected lobes.
    fn refine(&self, mut lobes: Vec<VisibilityLobe>, values: &[f64]) -> Vec<VisibilityLobe> {
        const ITERATIONS: usize = 12;
        let np = 5 * lobes.len();
        let mut damping = 1e-3;
        let mut best = self.residual(&lobes, values);
        let mut jtj = vec![0.0; np * np];
        let mut jtr = vec![0.0; np];
        let mut row = vec![0.0; np];
        for _ in 0..ITERATIONS {
            jtj.iter_mut().for_each(|v| *v = 0.0);
            jtr.iter_mut().for_each(|v| *v = 0.0);
            for (&d, v) in self.directions.iter().zip(values) {
                let mut r = -v;
                for (i, l) in lobes.iter().enumerate() {
                    let arg = d.dot(l.axis) - 1.0;
                    let e = (l.sharpness * arg).exp();
                    r += l.amplitude * e;
                    // Tangential axis derivative; the axis is renormalised after each step.
                    let da = l.amplitude * e * l.sharpness * (d - l.axis * d.dot(l.axis));
                    row[5 * i..5 * i + 5].copy_from_slice(&[da.x, da.y, da.z, l.amplitude * e * arg, e]);
                }
                for a in 0..np {
                    jtr[a] += row[a] * r;
                    for b in 0..=a {
                        jtj[a * np + b] += row[a] * row[b];
                    }
                }
            }
            // Floor on the damping diagonal: a constant lobe has no axis sensitivity.
            let floor = 1e-6 * (0..np).map(|a| jtj[a * np + a]).fold(1e-12, f64::max);
            let mut improved = false;
            for _ in 0..4 {
                let mut m = vec![0.0; np * np];
                for a in 0..np {
                    for b in 0..=a {
                        m[a * np + b] = jtj[a * np + b];
                        m[b * np + a] = jtj[a * np + b];
                    }
                    m[a * np + a] += damping * jtj[a * np + a].max(floor) + floor;
                }
                let mut rhs: Vec<f64> = jtr.iter().map(|v| -v).collect();
                let Some(step) = solve_spd(&mut m, &mut rhs, np) else {
                    damping *= 10.0;
                    continue;
                };
                let trial: Vec<VisibilityLobe> = lobes
                    .iter()
                    .enumerate()
                    .map(|(i, l)| {
                        let s = &step[5 * i..5 * i + 5];
                        let axis = l.axis + Vec3::new(s[0], s[1], s[2]);
                        let len = axis.length();
                        VisibilityLobe {
                            axis: if len > 1e-9 { axis / len } else { l.axis },
                            sharpness: (l.sharpness + s[3]).clamp(0.0, 100.0),
                            amplitude: (l.amplitude + s[4]).clamp(0.0, 1.0),
                        }
                    })
                    .collect();
                let r = self.residual(&trial, values);
                if r < best {
                    best = r;
                    lobes = trial;
                    damping = (damping * 0.3).max(1e-9);
                    improved = true;
                    break;
                }
                damping *= 10.0;
            }
            if !improved {
                break;
            }
        }
        lobes
    }

    /// Least squares on the selected atoms, dropping atoms until every
    /// coefficient is non-negative. `None` if the normal equations are singular.
    fn nonneg_least_squares(&self, selected: &mut Vec<usize>, values: &[f64]) -> Option<Vec<f64>> {
        loop {
            let m = selected.len();
            let mut ata = vec![0.0; m * m];
            let mut atb = vec![0.0; m];
            for i in 0..m {
                let bi = &self.basis[selected[i]];
                atb[i] = bi.iter().zip(values).map(|(a, b)| a * b).sum();
                for j in 0..=i {
                    let v: f64 = bi.iter().zip(&self.basis[selected[j]]).map(|(a, b)| a * b).sum();
                    ata[i * m + j] = v;
                    ata[j * m + i] = v;
                }
            }
            let c = solve_spd(&mut ata, &mut atb, m)?;
            match c.iter().enumerate().filter(|(_, v)| **v < 0.0).min_by(|a, b| a.1.total_cmp(b.1)) {
                Some((worst, _)) if m > 1 => {
                    selected.remove(worst);
                }
                Some(_) => return Some(vec![0.0]),
                None => return Some(c),
            }
        }
    }
}

/// Cholesky solve of a small SPD system in place.
fn solve_spd(a: &mut [f64], b: &mut [f64], n: usize) -> Option<Vec<f64>> {
    let scale = (0..n).map(|i| a[i * n + i]).fold(0.0, f64::max);
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if d <= 1e-10 * scale {
            return None;
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
    }
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= a[i * n + k] * b[k];
        }
        b[i] = s / a[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= a[k * n + i] * b[k];
        }
        b[i] = s / a[i * n + i];
    }
    Some(b.to_vec())
}

/// Fits `k` visibility lobes to `(direction, visibility)` samples.
///
/// Falls back to a single constant lobe at the mean visibility when the
/// samples cannot support `k` lobes.
pub fn fit_visibility_sg(samples: &[(Vec3, f64)], k: usize) -> Vec<VisibilityLobe> {
    let fitter = VisibilityFitter::new(samples.iter().map(|s| s.0).collect());
    let values: Vec<f64> = samples.iter().map(|s| s.1).collect();
    fitter.fit(&values, k)
}

/// Evaluates a fitted visibility, clamped to `[0, 1]`.
pub fn eval_visibility(lobes: &[VisibilityLobe], omega: Vec3) -> f64 {
    lobes.iter().map(|l| l.eval(omega)).sum::<f64>().clamp(0.0, 1.0)
}

/// Per-voxel directional visibility.
///
/// Holds `lobes_per_voxel` SG lobes for the diffuse term and, for every
/// specular light direction, the marched transmittance from the voxel centre.
#[derive(Clone, Debug, PartialEq)]
pub struct VisibilityField {
    pub resolution: [usize; 3],
    pub lobes_per_voxel: usize,
    pub lobes: Vec<VisibilityLobe>,
    pub specular_directions: Vec<Vec3>,
    /// `voxel * specular_directions.len() + direction`.
    pub specular_transmittance: Vec<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct VisibilityFitSettings {
    pub samples: usize,
    pub lobes: usize,
    /// March step as a fraction of the smallest voxel spacing.
    pub step_fraction: f64,
}

impl Default for VisibilityFitSettings {
    fn default() -> Self {
        Self {
            samples: DEFAULT_VISIBILITY_SAMPLES,
            lobes: DEFAULT_VISIBILITY_LOBES,
            step_fraction: 0.5,
        }
    }
}

impl VisibilityField {
    /// Everything visible from everywhere.
    pub fn unoccluded(grid: &VolumeGrid, specular_directions: Vec<Vec3>) -> Self {
        let n = grid.voxel_count();
        Self {
            resolution: grid.resolution,
            lobes_per_voxel: 1,
            lobes: vec![VisibilityLobe::constant(1.0); n],
            specular_transmittance: vec![1.0; n * specular_directions.len()],
            specular_directions,
        }
    }

    /// Marches every voxel centre toward the fit and specular directions and
    /// fits SG lobes. Voxels are independent and processed in parallel.
    pub fn compute(grid: &VolumeGrid, specular_directions: Vec<Vec3>, settings: &VisibilityFitSettings) -> Self {
        let fitter = VisibilityFitter::new(fibonacci_sphere(settings.samples));
        let spacing = grid.spacing();
        let step = settings.step_fraction * spacing.min_element();
        let k = settings.lobes.max(1);
        let nd = specular_directions.len();
        let per_voxel: Vec<(Vec<VisibilityLobe>, Vec<f32>)> = (0..grid.voxel_count())
            .into_par_iter()
            .map(|idx| {
                let x = grid.voxel_center(idx);
                let values: Vec<f64> =
                    fitter.directions().iter().map(|&d| march_transmittance(grid, x, d, step)).collect();
                let lobes = fitter.fit(&values, k);
                let spec = specular_directions
                    .iter()
                    .map(|&d| march_transmittance(grid, x, d, step) as f32)
                    .collect();
                (lobes, spec)
            })
            .collect();
        let mut lobes = Vec::with_capacity(grid.voxel_count() * k);
        let mut specular_transmittance = Vec::with_capacity(grid.voxel_count() * nd);
        for (l, s) in per_voxel {
            lobes.extend(l);
            specular_transmittance.extend(s);
        }
        Self {
            resolution: grid.resolution,
            lobes_per_voxel: k,
            lobes,
            specular_directions,
            specular_transmittance,
        }
    }

    #[inline]
    pub fn voxel_lobes(&self, voxel: usize) -> &[VisibilityLobe] {
        &self.lobes[voxel * self.lobes_per_voxel..(voxel + 1) * self.lobes_per_voxel]
    }

    #[inline]
    pub fn specular(&self, voxel: usize, direction: usize) -> f64 {
        self.specular_transmittance[voxel * self.specular_directions.len() + direction] as f64
    }

    pub fn eval(&self, voxel: usize, omega: Vec3) -> f64 {
        eval_visibility(self.voxel_lobes(voxel), omega)
    }
}

/// Parses an SG environment file: one `axis_x axis_y axis_z sharpness mu_r mu_g mu_b`
/// lobe per line, `#` starts a comment.
pub fn parse_env_sg(text: &str) -> Result<EnvLight> {
    const FIELDS: [&str; 7] = ["axis_x", "axis_y", "axis_z", "sharpness", "mu_r", "mu_g", "mu_b"];
    let mut lobes = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let tokens: Vec<&str> = content.split_whitespace().collect();
        if tokens.len() != FIELDS.len() {
            return Err(Error::Parse {
                line,
                field: FIELDS.get(tokens.len()).unwrap_or(&"end of line").to_string(),
                message: format!("expected {} values, found {}", FIELDS.len(), tokens.len()),
            });
        }
        let mut v = [0.0f64; 7];
        for (k, tok) in tokens.iter().enumerate() {
            v[k] = tok.parse::<f64>().ok().filter(|x| x.is_finite()).ok_or_else(|| Error::Parse {
                line,
                field: FIELDS[k].into(),
                message: format!("'{tok}' is not a finite number"),
            })?;
        }
        let lobe = SgLobe {
            axis: Vec3::new(v[0], v[1], v[2]),
            sharpness: v[3],
            amplitude: Rgb::new(v[4], v[5], v[6]),
        };
        EnvLight::new(vec![lobe]).map_err(|e| Error::Parse {
            line,
            field: if (lobe.axis.length() - 1.0).abs() > 1e-6 { "axis" } else if lobe.sharpness < 0.0 { "sharpness" } else { "mu" }.into(),
            message: e.to_string(),
        })?;
        lobes.push(lobe);
    }
    if lobes.is_empty() {
        return Err(Error::Parse {
            line: text.lines().count(),
            field: "lobes".into(),
            message: "environment file contains no lobes".into(),
        });
    }
    EnvLight::new(lobes)
}

pub fn format_env_sg(env: &EnvLight) -> String {
    let mut out = String::from("# axis_x axis_y axis_z sharpness mu_r mu_g mu_b\n");
    for l in &env.lobes {
        // `{:?}` prints the shortest representation that round-trips exactly.
        writeln!(
            out,
            "{:?} {:?} {:?} {:?} {:?} {:?} {:?}",
            l.axis.x, l.axis.y, l.axis.z, l.sharpness, l.amplitude.x, l.amplitude.y, l.amplitude.z
        )
        .unwrap();
    }
    out
}

pub fn load_env_sg(path: &Path) -> Result<EnvLight> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_env_sg(&text)
}

pub fn save_env_sg(env: &EnvLight, path: &Path) -> Result<()> {
    write_atomic(path, format_env_sg(env).as_bytes())
}
