//! Deterministic single-scatter ray marching.
//!
//! Each sample along a camera ray is lit by the environment once: a diffuse
//! term from the closed-form SG product and a specular term summed over a
//! fixed set of light directions. Samples are composited NeRF-style, which is
//! exact for piecewise-constant density.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{Camera, Ray};
use crate::error::{Error, Result};
use crate::field::{AppearanceDecoder, Corners, VolumeGrid};
use crate::image::HdrImage;
use crate::inverse::GradientBuffer;
use crate::lighting::{
    diffuse_irradiance, diffuse_irradiance_backward, march_transmittance, EnvLight, VisibilityField,
    VisibilityLobe,
};
use crate::math::{fibonacci_sphere, normalize_backward, sigmoid, softplus, Rgb, Vec3, INV_PI};
use crate::phase::PhaseWeights;
use crate::sggx::{ndf_axial, projected_area_axial};

/// Rays stop once their transmittance drops below this (fast mode only).
pub const EARLY_TERMINATION: f64 = 1e-4;
/// Samples thinner than this are composited but not shaded (fast mode only).
pub const MIN_SHADED_DENSITY: f64 = 1e-6;
/// Cached specular transmittance at or above this counts as visible.
pub const SPECULAR_VISIBILITY_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VisibilityMode {
    /// Fitted SG lobes for diffuse, cached per-voxel transmittance for specular.
    SgFit,
    /// Fitted SG lobes for diffuse, transmittance marched at every sample for specular.
    Marched,
    /// Everything fully visible.
    Off,
}

/// Directions of the specular light quadrature.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LightDirections {
    LobeAxes,
    Fibonacci(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderSettings {
    pub steps_per_ray: usize,
    pub light_directions: LightDirections,
    pub phase_weights: PhaseWeights,
    pub visibility: VisibilityMode,
    /// Midpoint samples. When false, samples are jittered within their segment.
    pub deterministic: bool,
    /// Disables early termination and low-density skipping, for gradient checks.
    pub exact: bool,
    pub background: Rgb,
    /// Jitter seed when not deterministic.
    pub seed: u64,
    /// Material edit applied to every decoded albedo. Forward rendering only.
    pub albedo_remap: Option<AlbedoRemap>,
}

/// `a' = clamp(scale · a + offset, 0, 1)` per channel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlbedoRemap {
    pub scale: Rgb,
    pub offset: Rgb,
}

impl AlbedoRemap {
    pub const IDENTITY: Self = Self {
        scale: Rgb::ONE,
        offset: Rgb::ZERO,
    };

    #[inline]
    pub fn apply(&self, albedo: Rgb) -> Rgb {
        (self.scale * albedo + self.offset).clamp(Rgb::ZERO, Rgb::ONE)
    }

    /// Whether some albedo in `[0, 1]` maps outside `[0, 1]` before clamping.
    pub fn clamps(&self) -> bool {
        let a = self.offset;
        let b = self.scale + self.offset;
        a.min(b).min_element() < 0.0 || a.max(b).max_element() > 1.0
    }
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            steps_per_ray: 48,
            light_directions: LightDirections::LobeAxes,
            phase_weights: PhaseWeights::default(),
            visibility: VisibilityMode::SgFit,
            deterministic: true,
            exact: false,
            background: Rgb::ZERO,
            seed: 0,
            albedo_remap: None,
        }
    }
}

impl RenderSettings {
    pub fn validate(&self) -> Result<()> {
        if self.steps_per_ray < 2 {
            return Err(Error::Config(format!("steps_per_ray must be at least 2, got {}", self.steps_per_ray)));
        }
        if let LightDirections::Fibonacci(0) = self.light_directions {
            return Err(Error::Config("need at least one specular light direction".into()));
        }
        if !self.background.is_finite() {
            return Err(Error::Config("background must be finite".into()));
        }
        PhaseWeights::new(self.phase_weights.w_diffuse, self.phase_weights.w_specular)?;
        Ok(())
    }
}

/// Specular quadrature directions for `env` under `settings`.
pub fn light_directions(env: &EnvLight, settings: &RenderSettings) -> Vec<Vec3> {
    match settings.light_directions {
        LightDirections::LobeAxes => env.axes(),
        LightDirections::Fibonacci(n) => fibonacci_sphere(n),
    }
}

/// One composited sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RadianceSample {
    pub position: Vec3,
    /// Transmittance from the camera up to (not including) this sample.
    pub transmittance: f64,
    pub sigma: f64,
    pub radiance: Rgb,
    pub step: f64,
    /// False when shading was skipped; the radiance is then zero.
    pub shaded: bool,
}

impl RadianceSample {
    /// Compositing weight `T_k (1 − e^{−σ_k δ_k})`.
    #[inline]
    pub fn weight(&self) -> f64 {
        self.transmittance * -(-self.sigma * self.step).exp_m1()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MarchOutput {
    pub ray: Ray,
    pub color: Rgb,
    pub transmittance: f64,
    /// Present when the march was asked to record it.
    pub trace: Option<Vec<RadianceSample>>,
}

/// Scene, light and settings bundled for repeated marching.
pub struct Renderer<'a> {
    pub grid: &'a VolumeGrid,
    pub decoder: &'a AppearanceDecoder,
    pub env: &'a EnvLight,
    pub settings: &'a RenderSettings,
    visibility: Option<&'a VisibilityField>,
    directions: Vec<Vec3>,
    /// `L(ω_l)` at every specular direction.
    radiance: Vec<Rgb>,
    d_omega: f64,
    march_step: f64,
}

const FULL_VISIBILITY: [VisibilityLobe; 1] = [VisibilityLobe {
    axis: Vec3::Z,
    sharpness: 0.0,
    amplitude: 1.0,
}];

/// Per-sample quantities shared by shading and its adjoint.
struct Local {
    corners: Corners,
    voxel: usize,
    raw_normal: Vec3,
    normal: Vec3,
}

impl<'a> Renderer<'a> {
    pub fn new(
        grid: &'a VolumeGrid,
        decoder: &'a AppearanceDecoder,
        env: &'a EnvLight,
        visibility: Option<&'a VisibilityField>,
        settings: &'a RenderSettings,
    ) -> Result<Self> {
        settings.validate()?;
        if decoder.latent_dim != grid.latent_dim {
            return Err(Error::Config(format!(
                "decoder expects {} latent channels, grid has {}",
                decoder.latent_dim, grid.latent_dim
            )));
        }
        let directions = light_directions(env, settings);
        let visibility = match settings.visibility {
            VisibilityMode::Off => None,
            mode => {
                let v = visibility.ok_or_else(|| {
                    Error::Config(format!("visibility mode {mode:?} needs a visibility field"))
                })?;
                if v.resolution != grid.resolution || v.lobes.len() != grid.voxel_count() * v.lobes_per_voxel {
                    return Err(Error::Config("visibility field does not match the grid".into()));
                }
                if mode == VisibilityMode::SgFit && v.specular_directions != directions {
                    return Err(Error::Config(
                        "visibility field was computed for different specular directions".into(),
                    ));
                }
                Some(v)
            }
        };
        let radiance = directions.iter().map(|&d| env.eval(d)).collect();
        let d_omega = 4.0 * std::f64::consts::PI / directions.len() as f64;
        Ok(Self {
            grid,
            decoder,
            env,
            settings,
            visibility,
            directions,
            radiance,
            d_omega,
            march_step: 0.5 * grid.spacing().min_element(),
        })
    }

    pub fn directions(&self) -> &[Vec3] {
        &self.directions
    }

    fn local(&self, corners: Corners, x: Vec3) -> Local {
        let raw_normal = self.grid.interp_raw_normal(&corners);
        let len = raw_normal.length();
        Local {
            voxel: self.grid.nearest_voxel(x).unwrap_or(corners.index[0]),
            normal: if len > 1e-12 { raw_normal / len } else { Vec3::Z },
            raw_normal,
            corners,
        }
    }

    fn diffuse_visibility(&self, voxel: usize) -> &[VisibilityLobe] {
        match self.visibility {
            Some(v) => v.voxel_lobes(voxel),
            None => &FULL_VISIBILITY,
        }
    }

    #[inline]
    fn specular_visible(&self, voxel: usize, l: usize, x: Vec3) -> bool {
        match (self.settings.visibility, self.visibility) {
            (VisibilityMode::SgFit, Some(v)) => v.specular(voxel, l) >= SPECULAR_VISIBILITY_THRESHOLD,
            (VisibilityMode::Marched, Some(_)) => {
                march_transmittance(self.grid, x, self.directions[l], self.march_step)
                    >= SPECULAR_VISIBILITY_THRESHOLD
            }
            _ => true,
        }
    }

    /// `Σ_l D(h_l) L_l V_l`, the specular sum before the `Δω / (4σ(ω_i))` factor.
    fn specular_sum(&self, loc: &Local, x: Vec3, omega_i: Vec3, tau: f64) -> Rgb {
        let mut acc = Rgb::ZERO;
        for (l, &dir) in self.directions.iter().enumerate() {
            let h = omega_i + dir;
            let len = h.length();
            if len < 1e-12 || !self.specular_visible(loc.voxel, l, x) {
                continue;
            }
            acc += ndf_axial(loc.normal.dot(h) / len, tau).0 * self.radiance[l];
        }
        acc
    }

    /// In-scattered radiance `ν* = w_d ν_d + w_s ν_s` at `x` toward `omega_i`.
    fn shade(&self, loc: &Local, x: Vec3, omega_i: Vec3, z: &mut [f64]) -> Rgb {
        let w = self.settings.phase_weights;
        self.grid.interp_latent(&loc.corners, z);
        let app = self.decoder.decode(z);
        let mut nu = Rgb::ZERO;
        if w.w_diffuse != 0.0 {
            let e = diffuse_irradiance(loc.normal, &self.env.lobes, self.diffuse_visibility(loc.voxel));
            let albedo = self.settings.albedo_remap.map_or(app.albedo, |r| r.apply(app.albedo));
            nu += w.w_diffuse * INV_PI * albedo * e;
        }
        if w.w_specular != 0.0 {
            let sigma_i = projected_area_axial(omega_i.dot(loc.normal), app.tau).0;
            nu += (w.w_specular * self.d_omega / (4.0 * sigma_i)) * self.specular_sum(loc, x, omega_i, app.tau);
        }
        nu
    }

    /// Radiance scattered toward `omega_i` at `x`, or `None` outside the grid.
    pub fn scatter_radiance(&self, x: Vec3, omega_i: Vec3) -> Option<Rgb> {
        let corners = self.grid.corners(x)?;
        let mut z = vec![0.0; self.grid.latent_dim];
        Some(self.shade(&self.local(corners, x), x, omega_i, &mut z))
    }

    /// Marches one ray. `stream` selects the jitter sequence when not deterministic.
    pub fn march(&self, ray: &Ray, stream: u64, record: bool) -> MarchOutput {
        let s = self.settings;
        let miss = MarchOutput {
            ray: *ray,
            color: s.background,
            transmittance: 1.0,
            trace: record.then(Vec::new),
        };
        let Some((t0, t1)) = self.grid.bounds.intersect(ray.origin, ray.direction) else {
            return miss;
        };
        if !(t1 > t0) {
            return miss;
        }
        let n = s.steps_per_ray;
        let dt = (t1 - t0) / n as f64;
        let mut rng = (!s.deterministic).then(|| {
            let mut r = ChaCha8Rng::seed_from_u64(s.seed);
            r.set_stream(stream);
            r
        });
        let omega_i = -ray.direction;
        let mut z = vec![0.0; self.grid.latent_dim];
        let mut trace = record.then(|| Vec::with_capacity(n));
        let mut t_acc = 1.0;
        let mut color = Rgb::ZERO;
        for k in 0..n {
            if !s.exact && t_acc < EARLY_TERMINATION {
                break;
            }
            let u = rng.as_mut().map_or(0.5, |r| r.random::<f64>());
            let x = ray.at(t0 + (k as f64 + u) * dt);
            let Some(corners) = self.grid.corners(x) else {
                continue;
            };
            let sigma = softplus(self.grid.interp_raw_density(&corners));
            let shaded = s.exact || sigma >= MIN_SHADED_DENSITY;
            let radiance = if shaded {
                self.shade(&self.local(corners, x), x, omega_i, &mut z)
            } else {
                Rgb::ZERO
            };
            let alpha = -(-sigma * dt).exp_m1();
            color += (t_acc * alpha) * radiance;
            if let Some(tr) = trace.as_mut() {
                tr.push(RadianceSample {
                    position: x,
                    transmittance: t_acc,
                    sigma,
                    radiance,
                    step: dt,
                    shaded,
                });
            }
            t_acc *= 1.0 - alpha;
        }
        MarchOutput {
            ray: *ray,
            color: color + t_acc * s.background,
            transmittance: t_acc,
            trace,
        }
    }

    /// Adds `∂(g·C)/∂θ` for one recorded march into `grads`.
    ///
    /// Light gradients are collected per specular direction; call
    /// [`Renderer::finish_gradients`] once after the last ray.
    pub fn backward_ray(&self, out: &MarchOutput, d_color: Rgb, grads: &mut GradientBuffer) -> Result<()> {
        let trace = out
            .trace
            .as_ref()
            .ok_or_else(|| Error::Contract("backward needs a march recorded with its trace".into()))?;
        if self.settings.albedo_remap.is_some() {
            return Err(Error::Contract("albedo remapping is not differentiable".into()));
        }
        if d_color == Rgb::ZERO {
            return Ok(());
        }
        let omega_i = -out.ray.direction;
        let mut z = vec![0.0; self.grid.latent_dim];
        let mut dz = vec![0.0; self.grid.latent_dim];
        // Colour composited behind the current sample, including the background.
        let mut behind = out.transmittance * self.settings.background;
        for s in trace.iter().rev() {
            let alpha = -(-s.sigma * s.step).exp_m1();
            let w = s.transmittance * alpha;
            let t_next = s.transmittance * (1.0 - alpha);
            let d_sigma = s.step * d_color.dot(t_next * s.radiance - behind);
            behind += w * s.radiance;
            let Some(corners) = self.grid.corners(s.position) else {
                continue;
            };
            let raw = self.grid.interp_raw_density(&corners);
            let d_raw = d_sigma * sigmoid(raw);
            for c in 0..8 {
                grads.raw_density[corners.index[c]] += corners.weight[c] * d_raw;
            }
            if s.shaded && w != 0.0 {
                let loc = self.local(corners, s.position);
                self.shade_backward(&loc, s.position, omega_i, w * d_color, grads, &mut z, &mut dz);
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn shade_backward(
        &self,
        loc: &Local,
        x: Vec3,
        omega_i: Vec3,
        d_nu: Rgb,
        grads: &mut GradientBuffer,
        z: &mut [f64],
        dz: &mut [f64],
    ) {
        let w = self.settings.phase_weights;
        self.grid.interp_latent(&loc.corners, z);
        let app = self.decoder.decode(z);
        let mut d_normal = Vec3::ZERO;
        let mut d_albedo = Rgb::ZERO;
        let mut d_tau = 0.0;

        if w.w_diffuse != 0.0 {
            let vis = self.diffuse_visibility(loc.voxel);
            let e = diffuse_irradiance(loc.normal, &self.env.lobes, vis);
            let k = w.w_diffuse * INV_PI;
            d_albedo += k * d_nu * e;
            diffuse_irradiance_backward(
                loc.normal,
                &self.env.lobes,
                vis,
                k * d_nu * app.albedo,
                &mut d_normal,
                &mut grads.light_sharpness,
                &mut grads.light_amplitude,
            );
        }

        if w.w_specular != 0.0 {
            let c_i = omega_i.dot(loc.normal);
            let (sigma_i, ds_dc, ds_dtau) = projected_area_axial(c_i, app.tau);
            let scale = w.w_specular * self.d_omega / (4.0 * sigma_i);
            let mut d_sigma_i = 0.0;
            for (l, &dir) in self.directions.iter().enumerate() {
                let h = omega_i + dir;
                let len = h.length();
                if len < 1e-12 || !self.specular_visible(loc.voxel, l, x) {
                    continue;
                }
                let h = h / len;
                let (d, dd_dc, dd_dtau) = ndf_axial(loc.normal.dot(h), app.tau);
                let g = d_nu.dot(self.radiance[l]) * scale;
                d_normal += g * dd_dc * h;
                d_tau += g * dd_dtau;
                d_sigma_i -= g * d / sigma_i;
                grads.light_radiance[l] += (scale * d) * d_nu;
            }
            d_normal += d_sigma_i * ds_dc * omega_i;
            d_tau += d_sigma_i * ds_dtau;
        }

        let len = loc.raw_normal.length();
        if len > 1e-12 && d_normal != Vec3::ZERO {
            let d_raw = normalize_backward(loc.normal, len, d_normal);
            for c in 0..8 {
                let b = 3 * loc.corners.index[c];
                let wc = loc.corners.weight[c];
                grads.raw_normal[b] += wc * d_raw.x;
                grads.raw_normal[b + 1] += wc * d_raw.y;
                grads.raw_normal[b + 2] += wc * d_raw.z;
            }
        }

        dz.iter_mut().for_each(|v| *v = 0.0);
        self.decoder.backward(
            z,
            &app,
            [d_albedo.x, d_albedo.y, d_albedo.z, d_tau],
            dz,
            &mut grads.decoder_weights,
            &mut grads.decoder_bias,
        );
        let kd = self.grid.latent_dim;
        for c in 0..8 {
            let b = kd * loc.corners.index[c];
            let wc = loc.corners.weight[c];
            for (g, d) in grads.latent[b..b + kd].iter_mut().zip(dz.iter()) {
                *g += wc * d;
            }
        }
    }

    /// Folds per-direction radiance gradients into lobe sharpness and amplitude.
    pub fn finish_gradients(&self, grads: &mut GradientBuffer) {
        for (l, &dir) in self.directions.iter().enumerate() {
            let g = std::mem::take(&mut grads.light_radiance[l]);
            if g == Rgb::ZERO {
                continue;
            }
            for (j, lobe) in self.env.lobes.iter().enumerate() {
                let arg = dir.dot(lobe.axis) - 1.0;
                let e = (lobe.sharpness * arg).exp();
                grads.light_amplitude[j] += e * g;
                grads.light_sharpness[j] += g.dot(lobe.amplitude) * e * arg;
            }
        }
    }

    pub fn render(&self, camera: &Camera) -> HdrImage {
        let (w, h) = (camera.width(), camera.height());
        let pixels: Vec<Rgb> = (0..w * h)
            .into_par_iter()
            .map(|p| {
                let ray = camera.ray_through((p % w) as f64 + 0.5, (p / w) as f64 + 0.5);
                self.march(&ray, p as u64, false).color
            })
            .collect();
        HdrImage {
            width: w,
            height: h,
            pixels,
        }
    }
}

pub fn scatter_radiance(
    grid: &VolumeGrid,
    decoder: &AppearanceDecoder,
    x: Vec3,
    omega_i: Vec3,
    env: &EnvLight,
    visibility: Option<&VisibilityField>,
    settings: &RenderSettings,
) -> Result<Rgb> {
    let r = Renderer::new(grid, decoder, env, visibility, settings)?;
    Ok(r.scatter_radiance(x, omega_i).unwrap_or(Rgb::ZERO))
}

/// Marches `ray` and records its samples.
pub fn march(
    grid: &VolumeGrid,
    decoder: &AppearanceDecoder,
    ray: &Ray,
    env: &EnvLight,
    visibility: Option<&VisibilityField>,
    settings: &RenderSettings,
) -> Result<MarchOutput> {
    Ok(Renderer::new(grid, decoder, env, visibility, settings)?.march(ray, 0, true))
}

pub fn render_image(
    grid: &VolumeGrid,
    decoder: &AppearanceDecoder,
    camera: &Camera,
    env: &EnvLight,
    visibility: Option<&VisibilityField>,
    settings: &RenderSettings,
) -> Result<HdrImage> {
    Ok(Renderer::new(grid, decoder, env, visibility, settings)?.render(camera))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::Aabb;
    use crate::lighting::SgLobe;
    use crate::math::{sphere_quadrature, softplus_inverse};
    use crate::phase::phase_specular_eval;
    use crate::sggx::{build_sggx, MicroflakeParams};
    use glam::DMat3;

    fn constant_env(mu: f64) -> EnvLight {
        EnvLight::new(vec![SgLobe {
            axis: Vec3::Z,
            sharpness: 0.0,
            amplitude: Rgb::splat(mu),
        }])
        .unwrap()
    }

    fn homogeneous(sigma: f64) -> VolumeGrid {
        VolumeGrid::new([4; 3], Aabb::cube(1.0), 2, softplus_inverse(sigma) as f32).unwrap()
    }

    fn off() -> RenderSettings {
        RenderSettings {
            visibility: VisibilityMode::Off,
            ..Default::default()
        }
    }

    #[test]
    fn zero_light_gives_black() {
        let g = homogeneous(3.0);
        let d = AppearanceDecoder::zeros(2);
        let env = constant_env(0.0);
        let s = off();
        let r = scatter_radiance(&g, &d, Vec3::ZERO, Vec3::X, &env, None, &s).unwrap();
        assert_eq!(r, Rgb::ZERO);
    }

    #[test]
    fn occluded_specular_is_black() {
        let mut g = homogeneous(3.0);
        g.raw_density.iter_mut().for_each(|v| *v = 40.0);
        let d = AppearanceDecoder::zeros(2);
        let env = EnvLight::uniform(8, 3.0, Rgb::ONE).unwrap();
        let s = RenderSettings {
            phase_weights: PhaseWeights::new(0.0, 1.0).unwrap(),
            ..Default::default()
        };
        let vis = VisibilityField::compute(&g, light_directions(&env, &s), &Default::default());
        let r = scatter_radiance(&g, &d, Vec3::ZERO, Vec3::X, &env, Some(&vis), &s).unwrap();
        assert_eq!(r, Rgb::ZERO);
    }

    #[test]
    fn specular_matches_brute_force_under_constant_light() {
        // Isotropic S: τ = 1 for every normal.
        let g = homogeneous(1.0);
        let mut d = AppearanceDecoder::zeros(2);
        d.bias[3] = 40.0;
        let env = constant_env(0.7);
        let s = RenderSettings {
            phase_weights: PhaseWeights::new(0.0, 1.0).unwrap(),
            visibility: VisibilityMode::Off,
            light_directions: LightDirections::Fibonacci(4096),
            ..Default::default()
        };
        let wi = Vec3::new(0.2, 0.3, 0.9).normalize();
        let r = scatter_radiance(&g, &d, Vec3::ZERO, wi, &env, None, &s).unwrap();
        let sggx = build_sggx(&MicroflakeParams::new(Vec3::Z, 1.0).unwrap());
        let brute = 0.7 * sphere_quadrature(100_000, |wl| phase_specular_eval(&sggx, wi, wl));
        assert!((r.x - brute).abs() < 0.1 * brute, "{} vs {brute}", r.x);
    }

    #[test]
    fn empty_scene_and_missed_rays() {
        let g = VolumeGrid::new([4; 3], Aabb::cube(1.0), 2, -200.0).unwrap();
        let d = AppearanceDecoder::zeros(2);
        let env = constant_env(1.0);
        let s = off();
        let out = march(&g, &d, &Ray { origin: Vec3::new(0.0, 0.0, 3.0), direction: -Vec3::Z }, &env, None, &s).unwrap();
        assert_eq!(out.color, Rgb::ZERO);
        assert_eq!(out.transmittance, 1.0);
        let miss = march(&g, &d, &Ray { origin: Vec3::new(5.0, 0.0, 3.0), direction: -Vec3::Z }, &env, None, &s).unwrap();
        assert_eq!((miss.color, miss.transmittance), (Rgb::ZERO, 1.0));
        let cam = Camera::look_at(Vec3::new(0.0, 0.0, 4.0), Vec3::ZERO, Vec3::Y, 8.0, [6, 5]).unwrap();
        let img = render_image(&g, &d, &cam, &env, None, &s).unwrap();
        assert!(img.pixels.iter().all(|p| *p == Rgb::ZERO));
    }

    #[test]
    fn homogeneous_medium_opacity() {
        let sigma = 1.3;
        let g = homogeneous(sigma);
        let d = AppearanceDecoder::zeros(2);
        let env = constant_env(1.0);
        let s = RenderSettings {
            steps_per_ray: 512,
            exact: true,
            ..off()
        };
        let ray = Ray { origin: Vec3::new(0.1, -0.2, 5.0), direction: -Vec3::Z };
        let out = march(&g, &d, &ray, &env, None, &s).unwrap();
        assert!((out.transmittance - (-2.0 * sigma).exp()).abs() < 1e-3);
        // Radiance is the same at every sample, so C = ν (1 − T).
        let nu = Renderer::new(&g, &d, &env, None, &s).unwrap().scatter_radiance(Vec3::ZERO, Vec3::Z).unwrap();
        assert!((out.color - nu * (1.0 - (-2.0 * sigma).exp())).abs().max_element() < 1e-3);
    }

    #[test]
    fn weights_and_transmittance_are_consistent() {
        let mut g = homogeneous(1.0);
        for (i, v) in g.raw_density.iter_mut().enumerate() {
            *v = ((i * 37) % 11) as f32 - 5.0;
        }
        let d = AppearanceDecoder::zeros(2);
        let env = constant_env(1.0);
        for exact in [false, true] {
            let s = RenderSettings { exact, ..off() };
            let ray = Ray { origin: Vec3::new(-3.0, 0.3, 0.2), direction: Vec3::new(1.0, 0.1, -0.05).normalize() };
            let out = march(&g, &d, &ray, &env, None, &s).unwrap();
            let tr = out.trace.unwrap();
            let sum: f64 = tr.iter().map(|s| s.weight()).sum();
            assert!((sum + out.transmittance - 1.0).abs() < 1e-12);
            assert!(tr.windows(2).all(|w| w[1].transmittance <= w[0].transmittance));
            assert!(tr.iter().all(|s| (0.0..=1.0).contains(&s.transmittance)));
        }
    }

    #[test]
    fn principal_ray_through_identity_camera() {
        let cam = Camera::new(DMat3::IDENTITY, Vec3::new(0.0, 0.0, 3.0), 4.0, [2.0, 2.0], [4, 4]).unwrap();
        let r = cam.ray_through(2.0, 2.0);
        assert_eq!(r.direction, -Vec3::Z);
    }

    #[test]
    fn settings_are_validated() {
        let g = homogeneous(1.0);
        let d = AppearanceDecoder::zeros(2);
        let env = constant_env(1.0);
        let s = RenderSettings { steps_per_ray: 1, ..off() };
        assert!(Renderer::new(&g, &d, &env, None, &s).is_err());
        let needs_field = RenderSettings::default();
        assert!(Renderer::new(&g, &d, &env, None, &needs_field).is_err());
        let wrong = VisibilityField::unoccluded(&g, vec![Vec3::X]);
        assert!(Renderer::new(&g, &d, &env, Some(&wrong), &needs_field).is_err());
    }

    #[test]
    fn backward_without_trace_is_a_contract_error() {
        let g = homogeneous(1.0);
        let d = AppearanceDecoder::zeros(2);
        let env = constant_env(1.0);
        let s = off();
        let r = Renderer::new(&g, &d, &env, None, &s).unwrap();
        let out = r.march(&Ray { origin: Vec3::new(0.0, 0.0, 3.0), direction: -Vec3::Z }, 0, false);
        let mut grads = GradientBuffer::new(&g, &d, &env, r.directions().len());
        assert!(matches!(r.backward_ray(&out, Rgb::ONE, &mut grads), Err(Error::Contract(_))));
    }

    #[test]
    fn jitter_is_reproducible() {
        let g = homogeneous(1.0);
        let d = AppearanceDecoder::zeros(2);
        let env = constant_env(1.0);
        let s = RenderSettings { deterministic: false, seed: 9, ..off() };
        let r = Renderer::new(&g, &d, &env, None, &s).unwrap();
        let ray = Ray { origin: Vec3::new(0.0, 0.0, 3.0), direction: -Vec3::Z };
        assert_eq!(r.march(&ray, 4, true), r.march(&ray, 4, true));
        assert_ne!(r.march(&ray, 4, true).trace, r.march(&ray, 5, true).trace);
    }
}
