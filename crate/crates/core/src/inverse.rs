//! Inverse rendering: losses, their adjoints and the optimization loop.
//!
//! The photometric loss is backpropagated through the deterministic march
//! exactly. Visibility is treated as a constant (it is refitted from the
//! current density every few hundred steps), and the compositing weights that
//! scale the density-normal loss are not differentiated.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::field::{Aabb, AppearanceDecoder, VolumeGrid, APPEARANCE_DIM, DEFAULT_LATENT_DIM};
use crate::image::{mse, psnr_from_mse, HdrImage};
use crate::lighting::{EnvLight, VisibilityField, VisibilityFitSettings};
use crate::math::{normalize_backward, sigmoid, sign0, Rgb, Vec3};
use crate::renderer::{light_directions, MarchOutput, RenderSettings, Renderer, VisibilityMode};

/// Target mean activation of the latent sparsity loss.
pub const SPARSITY_TARGET: f64 = 0.05;
/// Rays per gradient work unit. Fixed so the reduction order never depends on
/// the thread count.
const RAY_CHUNK: usize = 128;
/// Samples lighter than this are left out of the density-normal loss.
const MIN_NORMAL_LOSS_WEIGHT: f64 = 1e-5;
/// Rays at least this opaque contribute their heaviest sample to the smoothness loss.
const MIN_ANCHOR_OPACITY: f64 = 0.05;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainView {
    pub camera: Camera,
    pub image: HdrImage,
    /// Pixels to train on; all of them when absent.
    pub mask: Option<Vec<bool>>,
}

impl TrainView {
    pub fn new(camera: Camera, image: HdrImage) -> Result<Self> {
        if (image.width, image.height) != (camera.width(), camera.height()) {
            return Err(Error::Config(format!(
                "image is {}x{} but the camera is {}x{}",
                image.width,
                image.height,
                camera.width(),
                camera.height()
            )));
        }
        if image.pixels.iter().any(|p| !p.is_finite() || p.min_element() < 0.0) {
            return Err(Error::Config("training images must be finite and non-negative".into()));
        }
        Ok(Self {
            camera,
            image,
            mask: None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_c: f64,
    pub w_sigma: f64,
    pub w_z: f64,
    pub w_s: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_c: 1.0,
            w_sigma: 0.03,
            w_z: 1e-3,
            w_s: 1e-3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.w_c, self.w_sigma, self.w_z, self.w_s];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative, got {all:?}")));
        }
        Ok(())
    }
}

/// Unweighted loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub l_c: f64,
    pub l_sigma: f64,
    pub l_z: f64,
    pub l_s: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub terms: LossTerms,
    pub total: f64,
}

pub fn total_loss(parts: &LossTerms, weights: &LossWeights) -> (f64, LossBreakdown) {
    let total =
        weights.w_c * parts.l_c + weights.w_sigma * parts.l_sigma + weights.w_z * parts.l_z + weights.w_s * parts.l_s;
    (
        total,
        LossBreakdown {
            terms: *parts,
            total,
        },
    )
}

/// Which sign of `⟨ω_m, ω_i⟩` the orientation term penalises.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OrientationPenalty {
    /// `max(0, −⟨ω_m, ω_i⟩)`: normals facing away from the viewer.
    #[default]
    BackFacing,
    /// `max(0, ⟨ω_m, ω_i⟩)` as literally written.
    PaperLiteral,
}

impl OrientationPenalty {
    fn sign(self) -> f64 {
        match self {
            Self::BackFacing => -1.0,
            Self::PaperLiteral => 1.0,
        }
    }
}

/// Gradients shaped like the optimizable parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientBuffer {
    pub raw_density: Vec<f64>,
    pub raw_normal: Vec<f64>,
    pub latent: Vec<f64>,
    pub decoder_weights: Vec<f64>,
    pub decoder_bias: [f64; APPEARANCE_DIM],
    pub light_sharpness: Vec<f64>,
    pub light_amplitude: Vec<Rgb>,
    /// Per specular direction, folded into the lobes by `Renderer::finish_gradients`.
    pub(crate) light_radiance: Vec<Rgb>,
}

impl GradientBuffer {
    pub fn new(grid: &VolumeGrid, decoder: &AppearanceDecoder, env: &EnvLight, specular_directions: usize) -> Self {
        let n = grid.voxel_count();
        Self {
            raw_density: vec![0.0; n],
            raw_normal: vec![0.0; 3 * n],
            latent: vec![0.0; grid.latent_dim * n],
            decoder_weights: vec![0.0; decoder.weights.len()],
            decoder_bias: [0.0; APPEARANCE_DIM],
            light_sharpness: vec![0.0; env.lobes.len()],
            light_amplitude: vec![Rgb::ZERO; env.lobes.len()],
            light_radiance: vec![Rgb::ZERO; specular_directions],
        }
    }

    pub fn zero(&mut self) {
        for v in [&mut self.raw_density, &mut self.raw_normal, &mut self.latent, &mut self.decoder_weights, &mut self.light_sharpness] {
            v.iter_mut().for_each(|x| *x = 0.0);
        }
        self.decoder_bias = [0.0; APPEARANCE_DIM];
        self.light_amplitude.iter_mut().for_each(|x| *x = Rgb::ZERO);
        self.light_radiance.iter_mut().for_each(|x| *x = Rgb::ZERO);
    }

    pub fn add(&mut self, other: &Self) {
        let pairs = [
            (&mut self.raw_density, &other.raw_density),
            (&mut self.raw_normal, &other.raw_normal),
            (&mut self.latent, &other.latent),
            (&mut self.decoder_weights, &other.decoder_weights),
            (&mut self.light_sharpness, &other.light_sharpness),
        ];
        for (a, b) in pairs {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        self.decoder_bias.iter_mut().zip(&other.decoder_bias).for_each(|(x, y)| *x += y);
        self.light_amplitude.iter_mut().zip(&other.light_amplitude).for_each(|(x, y)| *x += *y);
        self.light_radiance.iter_mut().zip(&other.light_radiance).for_each(|(x, y)| *x += *y);
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        let scalars = self
            .raw_density
            .iter()
            .chain(&self.raw_normal)
            .chain(&self.latent)
            .chain(&self.decoder_weights)
            .chain(&self.decoder_bias)
            .chain(&self.light_sharpness)
            .fold(0.0f64, |m, v| m.max(v.abs()));
        self.light_amplitude
            .iter()
            .chain(&self.light_radiance)
            .fold(scalars, |m, v| m.max(v.abs().max_element()))
    }

    pub fn is_finite(&self) -> bool {
        self.max_abs().is_finite()
    }
}

/// Pulls an upstream colour gradient per ray back onto every parameter.
///
/// `marches` must have been recorded with their traces by `renderer`.
pub fn backward(renderer: &Renderer, marches: &[MarchOutput], d_color: &[Rgb]) -> Result<GradientBuffer> {
    if marches.len() != d_color.len() {
        return Err(Error::Contract(format!("{} marches but {} colour gradients", marches.len(), d_color.len())));
    }
    let mut grads = GradientBuffer::new(renderer.grid, renderer.decoder, renderer.env, renderer.directions().len());
    for (m, g) in marches.iter().zip(d_color) {
        renderer.backward_ray(m, *g, &mut grads)?;
    }
    renderer.finish_gradients(&mut grads);
    Ok(grads)
}

/// Mean over rays of the squared colour error, with its gradient.
pub fn loss_photometric(rendered: &[Rgb], target: &[Rgb]) -> Result<(f64, Vec<Rgb>)> {
    if rendered.len() != target.len() || rendered.is_empty() {
        return Err(Error::Contract(format!(
            "photometric loss needs equal non-empty batches, got {} and {}",
            rendered.len(),
            target.len()
        )));
    }
    let n = rendered.len() as f64;
    let mut loss = 0.0;
    let grad = rendered
        .iter()
        .zip(target)
        .map(|(r, t)| {
            let d = *r - *t;
            loss += d.length_squared();
            2.0 * d / n
        })
        .collect();
    Ok((loss / n, grad))
}

/// A point entering the density-normal loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormalLossSample {
    pub position: Vec3,
    /// Compositing weight, held constant.
    pub weight: f64,
    /// Unit direction toward the camera.
    pub omega_i: Vec3,
}

/// `Σ_k w_k (‖ω_m − n_σ‖² + max(0, ±⟨ω_m, ω_i⟩))` where `n_σ = −∇σ/|∇σ|`.
///
/// Points whose central-difference stencil leaves the grid or whose density
/// gradient vanishes are skipped. With `grads`, `scale · ∂L/∂θ` is added.
pub fn loss_density_normal(
    grid: &VolumeGrid,
    samples: &[NormalLossSample],
    penalty: OrientationPenalty,
    mut grads: Option<(&mut GradientBuffer, f64)>,
) -> f64 {
    let h = grid.spacing();
    let sign = penalty.sign();
    let mut loss = 0.0;
    'samples: for s in samples {
        let Some(c) = grid.corners(s.position) else { continue };
        let raw_n = grid.interp_raw_normal(&c);
        let len_n = raw_n.length();
        if len_n < 1e-12 {
            continue;
        }
        let n = raw_n / len_n;

        let mut stencil = [(None, None); 3];
        let mut grad_sigma = Vec3::ZERO;
        for a in 0..3 {
            let mut e = Vec3::ZERO;
            e[a] = h[a];
            let (Some(cp), Some(cm)) = (grid.corners(s.position + e), grid.corners(s.position - e)) else {
                continue 'samples;
            };
            if !grid.bounds.contains(s.position + e) || !grid.bounds.contains(s.position - e) {
                continue 'samples;
            }
            let (rp, rm) = (grid.interp_raw_density(&cp), grid.interp_raw_density(&cm));
            grad_sigma[a] = (crate::math::softplus(rp) - crate::math::softplus(rm)) / (2.0 * h[a]);
            stencil[a] = (Some((cp, rp)), Some((cm, rm)));
        }
        let len_g = grad_sigma.length();
        if len_g < 1e-8 {
            continue;
        }
        let target = -grad_sigma / len_g;
        let diff = n - target;
        let facing = sign * n.dot(s.omega_i);
        loss += s.weight * (diff.length_squared() + facing.max(0.0));

        let Some((buf, scale)) = grads.as_mut() else { continue };
        let w = s.weight * *scale;
        let mut d_n = 2.0 * w * diff;
        if facing > 0.0 {
            d_n += w * sign * s.omega_i;
        }
        let d_raw_n = normalize_backward(n, len_n, d_n);
        for k in 0..8 {
            let b = 3 * c.index[k];
            for a in 0..3 {
                buf.raw_normal[b + a] += c.weight[k] * d_raw_n[a];
            }
        }
        // target = −u/|u|  ⇒  du = −(I − t tᵀ) d_target / |u|
        let d_u = -normalize_backward(target, len_g, -2.0 * w * diff);
        for a in 0..3 {
            let d_sigma = d_u[a] / (2.0 * h[a]);
            for (side, sgn) in [(stencil[a].0, 1.0), (stencil[a].1, -1.0)] {
                let (cs, raw) = side.expect("stencil filled above");
                let d_raw = sgn * d_sigma * sigmoid(raw);
                for k in 0..8 {
                    buf.raw_density[cs.index[k]] += cs.weight[k] * d_raw;
                }
            }
        }
    }
    loss
}

/// `Σ_j KL(ρ ‖ ρ̂_j)` for Bernoulli means `ρ̂_j`, clamped to `[1e-6, 1 − 1e-6]`.
pub fn kl_sparsity(rho_hat: &[f64], rho: f64) -> f64 {
    rho_hat
        .iter()
        .map(|&r| {
            let r = r.clamp(1e-6, 1.0 - 1e-6);
            rho * (rho / r).ln() + (1.0 - rho) * ((1.0 - rho) / (1.0 - r)).ln()
        })
        .sum()
}

/// Sparsity loss over a batch of activations in `(0, 1)`, stored row-major
/// `batch × channels`. Returns the loss and its gradient per activation.
pub fn loss_sparsity(activations: &[f64], channels: usize, rho: f64) -> Result<(f64, Vec<f64>)> {
    if channels == 0 || activations.is_empty() || activations.len() % channels != 0 {
        return Err(Error::Contract(format!(
            "{} activations do not form a batch of {channels} channels",
            activations.len()
        )));
    }
    let batch = activations.len() / channels;
    let mut mean = vec![0.0; channels];
    for row in activations.chunks_exact(channels) {
        mean.iter_mut().zip(row).for_each(|(m, a)| *m += a);
    }
    mean.iter_mut().for_each(|m| *m /= batch as f64);
    let slope: Vec<f64> = mean
        .iter()
        .map(|&r| {
            if r <= 1e-6 || r >= 1.0 - 1e-6 {
                0.0
            } else {
                (-rho / r + (1.0 - rho) / (1.0 - r)) / batch as f64
            }
        })
        .collect();
    let grad = (0..activations.len()).map(|i| slope[i % channels]).collect();
    Ok((kl_sparsity(&mean, rho), grad))
}

/// One point of the smoothness loss with its two perturbations.
#[derive(Clone, Debug, PartialEq)]
pub struct SmoothnessSample {
    pub position: Vec3,
    pub offset: Vec3,
    pub latent_offset: Vec<f64>,
}

/// Mean L1 change of the normal under a spatial offset plus mean L1 change of
/// the decoded appearance under a latent offset.
pub fn loss_smoothness(
    grid: &VolumeGrid,
    decoder: &AppearanceDecoder,
    samples: &[SmoothnessSample],
    mut grads: Option<(&mut GradientBuffer, f64)>,
) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let inv_n = 1.0 / samples.len() as f64;
    let kd = grid.latent_dim;
    let mut z = vec![0.0; kd];
    let mut z2 = vec![0.0; kd];
    let mut dz = vec![0.0; kd];
    let normal_at = |x: Vec3| {
        let c = grid.corners(x)?;
        let raw = grid.interp_raw_normal(&c);
        let len = raw.length();
        (len > 1e-12).then_some((c, raw / len, len))
    };
    let mut loss = 0.0;
    for s in samples {
        if let (Some(a), Some(b)) = (normal_at(s.position), normal_at(s.position + s.offset)) {
            let d = a.1 - b.1;
            loss += d.abs().element_sum() * inv_n;
            if let Some((buf, scale)) = grads.as_mut() {
                let g = Vec3::new(sign0(d.x), sign0(d.y), sign0(d.z)) * (*scale * inv_n);
                for ((c, n, len), sgn) in [(a, 1.0), (b, -1.0)] {
                    let d_raw = normalize_backward(n, len, sgn * g);
                    for k in 0..8 {
                        for ax in 0..3 {
                            buf.raw_normal[3 * c.index[k] + ax] += c.weight[k] * d_raw[ax];
                        }
                    }
                }
            }
        }
        let Some(c) = grid.corners(s.position) else { continue };
        grid.interp_latent(&c, &mut z);
        z2.iter_mut().zip(&z).zip(&s.latent_offset).for_each(|((o, a), e)| *o = a + e);
        let (app, app2) = (decoder.decode(&z), decoder.decode(&z2));
        let (p, q) = (app.as_array(), app2.as_array());
        loss += (0..APPEARANCE_DIM).map(|i| (p[i] - q[i]).abs()).sum::<f64>() * inv_n;
        if let Some((buf, scale)) = grads.as_mut() {
            let g: [f64; APPEARANCE_DIM] = std::array::from_fn(|i| sign0(p[i] - q[i]) * *scale * inv_n);
            dz.iter_mut().for_each(|v| *v = 0.0);
            decoder.backward(&z, &app, g, &mut dz, &mut buf.decoder_weights, &mut buf.decoder_bias);
            decoder.backward(&z2, &app2, g.map(|v| -v), &mut dz, &mut buf.decoder_weights, &mut buf.decoder_bias);
            for k in 0..8 {
                let b = kd * c.index[k];
                for (gl, d) in buf.latent[b..b + kd].iter_mut().zip(&dz) {
                    *gl += c.weight[k] * d;
                }
            }
        }
    }
    loss
}

/// Adaptive-moment state for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64, len: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    /// Bias-corrected step; yields each parameter index and its increment.
    fn increments<'a>(&'a mut self, grads: &'a [f64]) -> impl Iterator<Item = f64> + 'a {
        assert_eq!(grads.len(), self.m.len(), "gradient and optimizer state sizes differ");
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        self.m.iter_mut().zip(self.v.iter_mut()).zip(grads).map(move |((m, v), &g)| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            -lr * (*m / c1) / ((*v / c2).sqrt() + eps)
        })
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        for (p, d) in params.iter_mut().zip(self.increments(grads)) {
            *p += d;
        }
    }

    pub fn step_f32(&mut self, params: &mut [f32], grads: &[f64]) {
        for (p, d) in params.iter_mut().zip(self.increments(grads)) {
            *p = (*p as f64 + d) as f32;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizeConfig {
    pub iterations: usize,
    pub batch_rays: usize,
    pub lr_grid: f64,
    pub lr_decoder: f64,
    pub lr_light: f64,
    /// Step sizes decay exponentially to this fraction of their start by the last iteration.
    pub lr_decay: f64,
    pub weights: LossWeights,
    pub seed: u64,
    /// Iterations of the geometry-only first stage.
    pub stage1_iterations: usize,
    /// Visibility is refitted every this many iterations in the second stage.
    pub visibility_refresh: usize,
    /// Write a checkpoint every this many iterations (0: never).
    pub checkpoint_every: usize,
    pub orientation: OrientationPenalty,
    /// Standard deviation of the smoothness perturbations.
    pub smoothness_std: f64,
    /// Voxels drawn per step for the sparsity loss.
    pub sparsity_batch: usize,
    pub resolution: [usize; 3],
    pub bounds: Aabb,
    pub latent_dim: usize,
    /// Lobes of the learned environment light.
    pub light_lobes: usize,
    /// Mean initial raw density.
    pub init_density: f64,
    pub render: RenderSettings,
    pub visibility_fit: VisibilityFitSettings,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        Self {
            iterations: 4000,
            batch_rays: 448,
            lr_grid: 0.03,
            lr_decoder: 0.01,
            lr_light: 0.02,
            lr_decay: 0.02,
            weights: LossWeights::default(),
            seed: 0,
            stage1_iterations: 300,
            visibility_refresh: 200,
            checkpoint_every: 0,
            orientation: OrientationPenalty::default(),
            smoothness_std: 0.1,
            sparsity_batch: 512,
            resolution: [16; 3],
            bounds: Aabb::cube(1.0),
            latent_dim: DEFAULT_LATENT_DIM,
            light_lobes: 16,
            init_density: -3.0,
            render: RenderSettings::default(),
            visibility_fit: VisibilityFitSettings::default(),
        }
    }
}

impl OptimizeConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [("lr_grid", self.lr_grid), ("lr_decoder", self.lr_decoder), ("lr_light", self.lr_light)];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!("lr_decay must be in (0, 1], got {}", self.lr_decay)));
        }
        if self.batch_rays == 0 || self.sparsity_batch == 0 || self.visibility_refresh == 0 {
            return Err(Error::Config("batch_rays, sparsity_batch and visibility_refresh must be positive".into()));
        }
        if !(self.smoothness_std >= 0.0) || !self.init_density.is_finite() {
            return Err(Error::Config("smoothness_std must be >= 0 and init_density finite".into()));
        }
        if self.light_lobes == 0 {
            return Err(Error::Config("light_lobes must be positive".into()));
        }
        self.weights.validate()?;
        self.render.validate()
    }

    /// Iterations `[0, stage1_iterations)` fit geometry only.
    pub fn stage(&self, iteration: usize) -> u8 {
        if iteration < self.stage1_iterations {
            1
        } else {
            2
        }
    }
}

/// One row of the optimization history.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub iter: usize,
    pub l_c: f64,
    pub l_sigma: f64,
    pub l_z: f64,
    pub l_s: f64,
    pub total: f64,
    /// Batch PSNR from `l_c` (peak 1).
    pub psnr: f64,
}

pub fn format_history_csv(rows: &[HistoryRow]) -> String {
    let mut out = String::from("iter,L_c,L_sigma,L_z,L_s,total,PSNR\n");
    for r in rows {
        out += &format!("{},{},{},{},{},{},{}\n", r.iter, r.l_c, r.l_sigma, r.l_z, r.l_s, r.total, r.psnr);
    }
    out
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Where periodic and failure checkpoints go.
    pub checkpoint_dir: Option<PathBuf>,
    /// Continue from this checkpoint directory.
    pub resume: Option<PathBuf>,
    /// Stop (writing a checkpoint) once this many iterations are done.
    pub stop_after: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct OptimizeResult {
    pub grid: VolumeGrid,
    pub decoder: AppearanceDecoder,
    pub env: EnvLight,
    /// Visibility of the final density.
    pub visibility: VisibilityField,
    pub history: Vec<HistoryRow>,
    /// Iterations actually completed.
    pub completed: usize,
    /// PSNR over all training pixels of the final scene.
    pub train_psnr: f64,
}

/// Optimizable state, everything a checkpoint has to restore.
#[derive(Clone, Debug)]
pub(crate) struct State {
    pub iteration: usize,
    pub grid: VolumeGrid,
    pub decoder: AppearanceDecoder,
    pub env: EnvLight,
    pub visibility: Option<VisibilityField>,
    pub adam: [Adam; 5],
    pub history: Vec<HistoryRow>,
}

const ADAM_DENSITY: usize = 0;
const ADAM_NORMAL: usize = 1;
const ADAM_LATENT: usize = 2;
const ADAM_DECODER: usize = 3;
const ADAM_LIGHT: usize = 4;

/// Seeded random initial scene.
pub fn initial_scene(config: &OptimizeConfig, known_light: Option<&EnvLight>) -> Result<(VolumeGrid, AppearanceDecoder, EnvLight)> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(u64::MAX);
    let mut grid = VolumeGrid::new(config.resolution, config.bounds, config.latent_dim, config.init_density as f32)?;
    let noise = Normal::new(0.0, 0.1).expect("valid std");
    for v in &mut grid.raw_density {
        *v = (config.init_density + noise.sample(&mut rng)) as f32;
    }
    for n in grid.raw_normal.chunks_exact_mut(3) {
        let d = loop {
            let v = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            if (0.01..=1.0).contains(&v.length_squared()) {
                break v.normalize();
            }
        };
        n.copy_from_slice(&[d.x as f32, d.y as f32, d.z as f32]);
    }
    for z in &mut grid.latent {
        *z = noise.sample(&mut rng) as f32;
    }
    let mut decoder = AppearanceDecoder::zeros(config.latent_dim);
    decoder.weights.iter_mut().for_each(|w| *w = noise.sample(&mut rng));
    let env = match known_light {
        Some(env) => env.clone(),
        None => EnvLight::uniform(config.light_lobes, 5.0, Rgb::splat(0.5))?,
    };
    Ok((grid, decoder, env))
}

struct Pixel {
    view: usize,
    index: usize,
}

/// Training-pixel catalogue.
fn pixel_list(views: &[TrainView]) -> Vec<Pixel> {
    let mut out = Vec::new();
    for (v, view) in views.iter().enumerate() {
        for i in 0..view.image.pixels.len() {
            if view.mask.as_ref().is_none_or(|m| m[i]) {
                out.push(Pixel { view: v, index: i });
            }
        }
    }
    out
}

struct ChunkResult {
    grads: GradientBuffer,
    l_c: f64,
    l_sigma: f64,
    /// Heaviest sample of each ray that has one.
    anchors: Vec<Vec3>,
}

/// Loss terms and gradients for one iteration's batch.
fn evaluate(
    state: &State,
    views: &[TrainView],
    pixels: &[Pixel],
    config: &OptimizeConfig,
    iteration: usize,
) -> Result<(LossTerms, GradientBuffer)> {
    let stage = config.stage(iteration);
    let settings = RenderSettings {
        visibility: if stage == 1 { VisibilityMode::Off } else { config.render.visibility },
        ..config.render.clone()
    };
    let renderer = Renderer::new(&state.grid, &state.decoder, &state.env, state.visibility.as_ref(), &settings)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(iteration as u64);
    let batch: Vec<usize> = (0..config.batch_rays).map(|_| rng.random_range(0..pixels.len())).collect();
    let n_rays = batch.len() as f64;
    let w = config.weights;
    let n_dirs = renderer.directions().len();

    let chunks: Vec<Result<ChunkResult>> = batch
        .par_chunks(RAY_CHUNK)
        .map(|chunk| {
            let mut grads = GradientBuffer::new(&state.grid, &state.decoder, &state.env, n_dirs);
            let (mut l_c, mut l_sigma) = (0.0, 0.0);
            let mut anchors = Vec::new();
            let mut normal_samples = Vec::new();
            for &p in chunk {
                let px = &pixels[p];
                let view = &views[px.view];
                let width = view.camera.width();
                let ray = view
                    .camera
                    .ray_through((px.index % width) as f64 + 0.5, (px.index / width) as f64 + 0.5);
                let out = renderer.march(&ray, ((px.view as u64) << 32) | px.index as u64, true);
                let diff = out.color - view.image.pixels[px.index];
                l_c += diff.length_squared();
                renderer.backward_ray(&out, w.w_c * 2.0 * diff / n_rays, &mut grads)?;

                let trace = out.trace.as_deref().unwrap_or_default();
                normal_samples.clear();
                normal_samples.extend(trace.iter().filter_map(|s| {
                    let weight = s.weight();
                    (weight > MIN_NORMAL_LOSS_WEIGHT).then_some(NormalLossSample {
                        position: s.position,
                        weight,
                        omega_i: -ray.direction,
                    })
                }));
                l_sigma += loss_density_normal(
                    &state.grid,
                    &normal_samples,
                    config.orientation,
                    Some((&mut grads, w.w_sigma / n_rays)),
                );
                if out.transmittance < 1.0 - MIN_ANCHOR_OPACITY {
                    if let Some(s) = trace.iter().max_by(|a, b| a.weight().total_cmp(&b.weight())) {
                        anchors.push(s.position);
                    }
                }
            }
            Ok(ChunkResult {
                grads,
                l_c,
                l_sigma,
                anchors,
            })
        })
        .collect();

    let mut grads = GradientBuffer::new(&state.grid, &state.decoder, &state.env, n_dirs);
    let mut terms = LossTerms::default();
    let mut anchors = Vec::new();
    for c in chunks {
        let c = c?;
        grads.add(&c.grads);
        terms.l_c += c.l_c;
        terms.l_sigma += c.l_sigma;
        anchors.extend(c.anchors);
    }
    terms.l_c /= n_rays;
    terms.l_sigma /= n_rays;
    renderer.finish_gradients(&mut grads);

    if stage == 2 {
        let kd = state.grid.latent_dim;
        let voxels: Vec<usize> =
            (0..config.sparsity_batch).map(|_| rng.random_range(0..state.grid.voxel_count())).collect();
        let acts: Vec<f64> = voxels
            .iter()
            .flat_map(|&v| state.grid.latent[v * kd..(v + 1) * kd].iter().map(|&z| sigmoid(z as f64)))
            .collect();
        let (l_z, d_acts) = loss_sparsity(&acts, kd, SPARSITY_TARGET)?;
        terms.l_z = l_z;
        for (i, &v) in voxels.iter().enumerate() {
            for j in 0..kd {
                let a = acts[i * kd + j];
                grads.latent[v * kd + j] += w.w_z * d_acts[i * kd + j] * a * (1.0 - a);
            }
        }

        let normal = Normal::new(0.0, config.smoothness_std.max(f64::MIN_POSITIVE)).expect("valid std");
        let std = config.smoothness_std;
        let mut draw = || if std > 0.0 { normal.sample(&mut rng) } else { 0.0 };
        let samples: Vec<SmoothnessSample> = anchors
            .into_iter()
            .map(|position| SmoothnessSample {
                position,
                offset: Vec3::new(draw(), draw(), draw()),
                latent_offset: (0..kd).map(|_| draw()).collect(),
            })
            .collect();
        terms.l_s = loss_smoothness(&state.grid, &state.decoder, &samples, Some((&mut grads, w.w_s)));
    }
    Ok((terms, grads))
}

fn apply_update(state: &mut State, grads: &GradientBuffer, config: &OptimizeConfig, learn_light: bool) {
    let it = state.iteration;
    let stage = config.stage(it);
    let decay = config.lr_decay.powf(it as f64 / config.iterations.max(1) as f64);
    let base = [config.lr_grid, config.lr_grid, config.lr_grid, config.lr_decoder, config.lr_light];
    for (adam, lr) in state.adam.iter_mut().zip(base) {
        adam.lr = lr * decay;
    }
    state.adam[ADAM_DENSITY].step_f32(&mut state.grid.raw_density, &grads.raw_density);
    state.adam[ADAM_NORMAL].step_f32(&mut state.grid.raw_normal, &grads.raw_normal);
    state.grid.reproject_normals();
    if stage == 1 {
        return;
    }
    state.adam[ADAM_LATENT].step_f32(&mut state.grid.latent, &grads.latent);
    let mut dec: Vec<f64> = state.decoder.weights.iter().chain(&state.decoder.bias).copied().collect();
    let g: Vec<f64> = grads.decoder_weights.iter().chain(&grads.decoder_bias).copied().collect();
    state.adam[ADAM_DECODER].step(&mut dec, &g);
    let nw = state.decoder.weights.len();
    state.decoder.weights.copy_from_slice(&dec[..nw]);
    state.decoder.bias.copy_from_slice(&dec[nw..]);
    if learn_light {
        let mut p: Vec<f64> = state
            .env
            .lobes
            .iter()
            .flat_map(|l| [l.sharpness, l.amplitude.x, l.amplitude.y, l.amplitude.z])
            .collect();
        let g: Vec<f64> = grads
            .light_sharpness
            .iter()
            .zip(&grads.light_amplitude)
            .flat_map(|(s, a)| [*s, a.x, a.y, a.z])
            .collect();
        state.adam[ADAM_LIGHT].step(&mut p, &g);
        for (l, v) in state.env.lobes.iter_mut().zip(p.chunks_exact(4)) {
            l.sharpness = v[0].max(0.0);
            l.amplitude = Rgb::new(v[1], v[2], v[3]).max(Rgb::ZERO);
        }
    }
}

fn needs_visibility_refresh(config: &OptimizeConfig, iteration: usize) -> bool {
    iteration >= config.stage1_iterations && (iteration - config.stage1_iterations) % config.visibility_refresh == 0
}

/// Fits grid, decoder and (unless `known_light` is given) the environment
/// light to the training views.
pub fn optimize(
    views: &[TrainView],
    config: &OptimizeConfig,
    known_light: Option<&EnvLight>,
    run: &RunOptions,
) -> Result<OptimizeResult> {
    if views.len() < 2 {
        return Err(Error::Config(format!("need at least 2 training views, got {}", views.len())));
    }
    config.validate()?;
    let pixels = pixel_list(views);
    if pixels.is_empty() {
        return Err(Error::Config("masks exclude every training pixel".into()));
    }
    let learn_light = known_light.is_none();

    let mut state = match &run.resume {
        Some(dir) => Checkpoint::load(dir, config)?.into_state(),
        None => {
            let (grid, decoder, env) = initial_scene(config, known_light)?;
            let nv = grid.voxel_count();
            let adam = [
                Adam::new(config.lr_grid, nv),
                Adam::new(config.lr_grid, 3 * nv),
                Adam::new(config.lr_grid, grid.latent_dim * nv),
                Adam::new(config.lr_decoder, decoder.weights.len() + APPEARANCE_DIM),
                Adam::new(config.lr_light, 4 * env.lobes.len()),
            ];
            State {
                iteration: 0,
                grid,
                decoder,
                env,
                visibility: None,
                adam,
                history: Vec::new(),
            }
        }
    };
    let specular_dirs = light_directions(&state.env, &config.render);
    let stop = run.stop_after.unwrap_or(usize::MAX).min(config.iterations);

    loop {
        let it = state.iteration;
        if it >= stop && it < config.iterations {
            if let Some(dir) = &run.checkpoint_dir {
                Checkpoint::from_state(&state, config).save(&dir.join(format!("iter-{it:06}")))?;
            }
            break;
        }
        if needs_visibility_refresh(config, it) {
            state.visibility = Some(VisibilityField::compute(&state.grid, specular_dirs.clone(), &config.visibility_fit));
        }
        let (terms, grads) = evaluate(&state, views, &pixels, config, it)?;
        let (total, _) = total_loss(&terms, &config.weights);
        if !total.is_finite() || !grads.is_finite() {
            let dir = run.checkpoint_dir.clone().unwrap_or_else(std::env::temp_dir).join(format!("failed-{it:06}"));
            let saved = Checkpoint::from_state(&state, config).save(&dir).ok().map(|_| dir);
            return Err(Error::Numeric {
                iteration: it,
                message: format!("non-finite loss {total} (terms {terms:?})"),
                checkpoint: saved,
            });
        }
        state.history.push(HistoryRow {
            iter: it,
            l_c: terms.l_c,
            l_sigma: terms.l_sigma,
            l_z: terms.l_z,
            l_s: terms.l_s,
            total,
            psnr: psnr_from_mse(terms.l_c / 3.0),
        });
        if it >= config.iterations {
            break;
        }
        apply_update(&mut state, &grads, config, learn_light);
        state.iteration += 1;
        // A checkpoint holds the state before its iteration's refresh and evaluation.
        if config.checkpoint_every > 0 && state.iteration % config.checkpoint_every == 0 {
            if let Some(dir) = &run.checkpoint_dir {
                Checkpoint::from_state(&state, config).save(&dir.join(format!("iter-{:06}", state.iteration)))?;
            }
        }
    }

    let visibility = VisibilityField::compute(&state.grid, specular_dirs, &config.visibility_fit);
    let train_psnr = evaluate_views(&state.grid, &state.decoder, &state.env, Some(&visibility), &config.render, views)?.0;
    Ok(OptimizeResult {
        completed: state.iteration,
        grid: state.grid,
        decoder: state.decoder,
        env: state.env,
        visibility,
        history: state.history,
        train_psnr,
    })
}

/// Renders every view and returns the PSNR over all pixels with the images.
pub fn evaluate_views(
    grid: &VolumeGrid,
    decoder: &AppearanceDecoder,
    env: &EnvLight,
    visibility: Option<&VisibilityField>,
    settings: &RenderSettings,
    views: &[TrainView],
) -> Result<(f64, Vec<HdrImage>)> {
    let r = Renderer::new(grid, decoder, env, visibility, settings)?;
    let images: Vec<HdrImage> = views.iter().map(|v| r.render(&v.camera)).collect();
    let total: f64 = images.iter().zip(views).map(|(img, v)| mse(img, &v.image) * img.pixels.len() as f64).sum();
    let count: usize = images.iter().map(|i| i.pixels.len()).sum();
    Ok((psnr_from_mse(total / count as f64), images))
}

/// Convenience for callers holding only a checkpoint path.
pub fn checkpoint_iteration(dir: &Path) -> Result<usize> {
    Checkpoint::peek_iteration(dir)
}
