//! Explicit scene representation.
//!
//! Every voxel stores a raw density, a raw (unnormalised) microflake normal
//! and a latent appearance code. Queries interpolate the raw values
//! trilinearly and only then apply the activations, so decoded values always
//! stay inside their ranges.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{sigmoid, softplus, Rgb, Vec3};
use crate::sggx::TAU_MIN;

pub const GRID_MAGIC: [u8; 4] = *b"MFGD";
pub const GRID_VERSION: u32 = 1;
pub const GRID_HEADER_BYTES: usize = 64;
pub const DEFAULT_LATENT_DIM: usize = 8;
/// Minimum stored raw-normal length; shorter vectors are re-projected.
pub const MIN_NORMAL_LEN: f64 = 1e-6;
/// Outputs of the appearance decoder: albedo rgb and roughness.
pub const APPEARANCE_DIM: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    /// Bounds are kept exactly representable in f32 so the binary format is lossless.
    pub fn new(min: Vec3, max: Vec3) -> Result<Self> {
        let q = |v: Vec3| Vec3::new(v.x as f32 as f64, v.y as f32 as f64, v.z as f32 as f64);
        let (min, max) = (q(min), q(max));
        if !(min.is_finite() && max.is_finite() && min.cmplt(max).all()) {
            return Err(Error::Domain(format!("invalid bounds {min} .. {max}")));
        }
        Ok(Self { min, max })
    }

    pub fn cube(half: f64) -> Self {
        Self::new(Vec3::splat(-half), Vec3::splat(half)).expect("positive half extent")
    }

    #[inline]
    pub fn contains(&self, x: Vec3) -> bool {
        x.cmpge(self.min).all() && x.cmple(self.max).all()
    }

    pub fn size(&self) -> Vec3 {
        self.max - self.min
    }

    /// Slab test: parametric `[t_near, t_far]` of the ray inside the box, if any.
    pub fn intersect(&self, origin: Vec3, dir: Vec3) -> Option<(f64, f64)> {
        let inv = dir.recip();
        let t0 = (self.min - origin) * inv;
        let t1 = (self.max - origin) * inv;
        let tmin = t0.min(t1);
        let tmax = t0.max(t1);
        // NaN from 0 * inf on an axis-parallel ray grazing a face: treat as unbounded.
        let near = [tmin.x, tmin.y, tmin.z].into_iter().filter(|v| !v.is_nan()).fold(f64::NEG_INFINITY, f64::max);
        let far = [tmax.x, tmax.y, tmax.z].into_iter().filter(|v| !v.is_nan()).fold(f64::INFINITY, f64::min);
        let near = near.max(0.0);
        (far > near).then_some((near, far))
    }
}

/// Eight interpolation corners and weights of a point.
#[derive(Clone, Copy, Debug)]
pub struct Corners {
    pub index: [usize; 8],
    pub weight: [f64; 8],
}

#[derive(Clone, Debug, PartialEq)]
pub struct VolumeGrid {
    pub resolution: [usize; 3],
    pub bounds: Aabb,
    pub latent_dim: usize,
    pub raw_density: Vec<f32>,
    /// Three values per voxel.
    pub raw_normal: Vec<f32>,
    /// `latent_dim` values per voxel.
    pub latent: Vec<f32>,
}

impl VolumeGrid {
    /// Grid filled with the given raw values and `+z` normals.
    pub fn new(resolution: [usize; 3], bounds: Aabb, latent_dim: usize, raw_density: f32) -> Result<Self> {
        if resolution.iter().any(|&r| r == 0) {
            return Err(Error::Config(format!("grid resolution must be positive, got {resolution:?}")));
        }
        if latent_dim == 0 {
            return Err(Error::Config("latent dimension must be positive".into()));
        }
        let n = resolution.iter().product::<usize>();
        let mut raw_normal = vec![0.0; 3 * n];
        raw_normal.iter_mut().skip(2).step_by(3).for_each(|z| *z = 1.0);
        Ok(Self {
            resolution,
            bounds,
            latent_dim,
            raw_density: vec![raw_density; n],
            raw_normal,
            latent: vec![0.0; latent_dim * n],
        })
    }

    pub fn voxel_count(&self) -> usize {
        self.raw_density.len()
    }

    pub fn spacing(&self) -> Vec3 {
        self.bounds.size() / Vec3::new(self.resolution[0] as f64, self.resolution[1] as f64, self.resolution[2] as f64)
    }

    /// x-fastest voxel index.
    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.resolution[0] * (j + self.resolution[1] * k)
    }

    pub fn voxel_coords(&self, idx: usize) -> [usize; 3] {
        let [rx, ry, _] = self.resolution;
        [idx % rx, (idx / rx) % ry, idx / (rx * ry)]
    }

    pub fn voxel_center(&self, idx: usize) -> Vec3 {
        let [i, j, k] = self.voxel_coords(idx);
        self.bounds.min + (Vec3::new(i as f64, j as f64, k as f64) + 0.5) * self.spacing()
    }

    /// Voxel whose cell contains `x`, if inside the bounds.
    pub fn nearest_voxel(&self, x: Vec3) -> Option<usize> {
        if !self.bounds.contains(x) {
            return None;
        }
        let g = (x - self.bounds.min) / self.spacing();
        let c = |v: f64, r: usize| (v.floor().max(0.0) as usize).min(r - 1);
        Some(self.index(c(g.x, self.resolution[0]), c(g.y, self.resolution[1]), c(g.z, self.resolution[2])))
    }

    /// Trilinear corners between voxel centres, clamped to the edge voxels.
    /// `None` outside the bounds.
    #[inline]
    pub fn corners(&self, x: Vec3) -> Option<Corners> {
        if !self.bounds.contains(x) {
            return None;
        }
        let g = (x - self.bounds.min) / self.spacing() - 0.5;
        let axis = |v: f64, r: usize| -> (usize, usize, f64) {
            if v <= 0.0 || r == 1 {
                (0, 0, 0.0)
            } else if v >= (r - 1) as f64 {
                (r - 1, r - 1, 0.0)
            } else {
                let i0 = v.floor() as usize;
                (i0, i0 + 1, v - i0 as f64)
            }
        };
        let (x0, x1, fx) = axis(g.x, self.resolution[0]);
        let (y0, y1, fy) = axis(g.y, self.resolution[1]);
        let (z0, z1, fz) = axis(g.z, self.resolution[2]);
        let mut index = [0usize; 8];
        let mut weight = [0.0f64; 8];
        for c in 0..8 {
            let (ix, wx) = if c & 1 == 0 { (x0, 1.0 - fx) } else { (x1, fx) };
            let (iy, wy) = if c & 2 == 0 { (y0, 1.0 - fy) } else { (y1, fy) };
            let (iz, wz) = if c & 4 == 0 { (z0, 1.0 - fz) } else { (z1, fz) };
            index[c] = self.index(ix, iy, iz);
            weight[c] = wx * wy * wz;
        }
        Some(Corners { index, weight })
    }

    #[inline]
    pub fn interp_raw_density(&self, c: &Corners) -> f64 {
        (0..8).map(|k| c.weight[k] * self.raw_density[c.index[k]] as f64).sum()
    }

    #[inline]
    pub fn interp_raw_normal(&self, c: &Corners) -> Vec3 {
        let mut v = Vec3::ZERO;
        for k in 0..8 {
            let b = 3 * c.index[k];
            let n = &self.raw_normal[b..b + 3];
            v += c.weight[k] * Vec3::new(n[0] as f64, n[1] as f64, n[2] as f64);
        }
        v
    }

    pub fn interp_latent(&self, c: &Corners, out: &mut [f64]) {
        let kd = self.latent_dim;
        out.iter_mut().for_each(|v| *v = 0.0);
        for k in 0..8 {
            let b = kd * c.index[k];
            for (o, z) in out.iter_mut().zip(&self.latent[b..b + kd]) {
                *o += c.weight[k] * *z as f64;
            }
        }
    }

    /// Decoded density `softplus(raw)`; zero outside the bounds.
    #[inline]
    pub fn density_at(&self, x: Vec3) -> f64 {
        self.corners(x).map_or(0.0, |c| softplus(self.interp_raw_density(&c)))
    }

    /// Rescales any raw normal shorter than [`MIN_NORMAL_LEN`] to that length
    /// (or to `+z` if it vanished). Idempotent.
    pub fn reproject_normals(&mut self) {
        for n in self.raw_normal.chunks_exact_mut(3) {
            let v = Vec3::new(n[0] as f64, n[1] as f64, n[2] as f64);
            let len = v.length();
            if len >= MIN_NORMAL_LEN && len.is_finite() {
                continue;
            }
            let fixed = if len > 0.0 && len.is_finite() { v / len * (2.0 * MIN_NORMAL_LEN) } else { Vec3::Z * (2.0 * MIN_NORMAL_LEN) };
            n.copy_from_slice(&[fixed.x as f32, fixed.y as f32, fixed.z as f32]);
        }
    }
}

/// Shared affine-then-sigmoid map from latent codes to albedo and roughness.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AppearanceDecoder {
    pub latent_dim: usize,
    /// Row-major `4 × latent_dim`.
    pub weights: Vec<f64>,
    pub bias: [f64; APPEARANCE_DIM],
}

/// Decoded appearance with the pre-activations kept for backprop.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Appearance {
    pub albedo: Rgb,
    pub tau: f64,
    /// `σ(p)` for all four outputs (albedo rgb, roughness gate).
    pub gate: [f64; APPEARANCE_DIM],
}

impl Appearance {
    pub fn as_array(&self) -> [f64; APPEARANCE_DIM] {
        [self.albedo.x, self.albedo.y, self.albedo.z, self.tau]
    }

    /// Derivative of each output with respect to its pre-activation.
    #[inline]
    pub fn output_slopes(&self) -> [f64; APPEARANCE_DIM] {
        let s = |g: f64| g * (1.0 - g);
        [
            s(self.gate[0]),
            s(self.gate[1]),
            s(self.gate[2]),
            (1.0 - TAU_MIN) * s(self.gate[3]),
        ]
    }
}

impl AppearanceDecoder {
    pub fn zeros(latent_dim: usize) -> Self {
        Self {
            latent_dim,
            weights: vec![0.0; APPEARANCE_DIM * latent_dim],
            bias: [0.0; APPEARANCE_DIM],
        }
    }

    #[inline]
    pub fn pre_activation(&self, z: &[f64]) -> [f64; APPEARANCE_DIM] {
        let mut p = self.bias;
        for (r, out) in p.iter_mut().enumerate() {
            let row = &self.weights[r * self.latent_dim..(r + 1) * self.latent_dim];
            *out += row.iter().zip(z).map(|(w, v)| w * v).sum::<f64>();
        }
        p
    }

    #[inline]
    pub fn decode(&self, z: &[f64]) -> Appearance {
        let p = self.pre_activation(z);
        let gate = p.map(sigmoid);
        Appearance {
            albedo: Rgb::new(gate[0], gate[1], gate[2]),
            tau: TAU_MIN + (1.0 - TAU_MIN) * gate[3],
            gate,
        }
    }

    /// `∂(albedo, τ)/∂z` as a row-major `4 × latent_dim` matrix.
    pub fn jacobian(&self, z: &[f64]) -> Vec<f64> {
        let slopes = self.decode(z).output_slopes();
        let mut j = self.weights.clone();
        for (r, s) in slopes.iter().enumerate() {
            j[r * self.latent_dim..(r + 1) * self.latent_dim].iter_mut().for_each(|v| *v *= s);
        }
        j
    }

    /// Pulls an output gradient back onto `z`, `W` and `b` (accumulating).
    pub fn backward(
        &self,
        z: &[f64],
        app: &Appearance,
        d_out: [f64; APPEARANCE_DIM],
        d_z: &mut [f64],
        d_weights: &mut [f64],
        d_bias: &mut [f64; APPEARANCE_DIM],
    ) {
        let slopes = app.output_slopes();
        for r in 0..APPEARANCE_DIM {
            let dp = d_out[r] * slopes[r];
            if dp == 0.0 {
                continue;
            }
            d_bias[r] += dp;
            let row = r * self.latent_dim;
            for k in 0..self.latent_dim {
                d_weights[row + k] += dp * z[k];
                d_z[k] += dp * self.weights[row + k];
            }
        }
    }
}

/// `D_m: z → (a, τ_m)`.
pub fn decode_appearance(decoder: &AppearanceDecoder, z: &[f64]) -> (Rgb, f64) {
    let a = decoder.decode(z);
    (a.albedo, a.tau)
}

/// Decoded scene parameters at a point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FieldSample {
    pub sigma: f64,
    pub albedo: Rgb,
    pub omega_m: Vec3,
    pub tau_m: f64,
}

/// Interpolate-then-activate query. Outside the bounds `sigma = 0` and the
/// appearance is that of a zero latent code.
pub fn sample_field(grid: &VolumeGrid, decoder: &AppearanceDecoder, x: Vec3) -> Result<FieldSample> {
    if !x.is_finite() {
        return Err(Error::Domain(format!("non-finite sample position {x}")));
    }
    let mut z = vec![0.0; grid.latent_dim];
    let Some(c) = grid.corners(x) else {
        let app = decoder.decode(&z);
        return Ok(FieldSample {
            sigma: 0.0,
            albedo: app.albedo,
            omega_m: Vec3::Z,
            tau_m: app.tau,
        });
    };
    grid.interp_latent(&c, &mut z);
    let app = decoder.decode(&z);
    let n = grid.interp_raw_normal(&c);
    let len = n.length();
    Ok(FieldSample {
        sigma: softplus(grid.interp_raw_density(&c)),
        albedo: app.albedo,
        omega_m: if len > 1e-12 { n / len } else { Vec3::Z },
        tau_m: app.tau,
    })
}

/// Raw `∇σ` by central differences at the grid spacing, or `None` if any
/// stencil point leaves the bounds.
pub(crate) fn density_gradient(grid: &VolumeGrid, x: Vec3) -> Option<Vec3> {
    let h = grid.spacing();
    let mut g = Vec3::ZERO;
    for a in 0..3 {
        let mut e = Vec3::ZERO;
        e[a] = h[a];
        let (p, m) = (x + e, x - e);
        if !grid.bounds.contains(p) || !grid.bounds.contains(m) {
            return None;
        }
        g[a] = (grid.density_at(p) - grid.density_at(m)) / (2.0 * h[a]);
    }
    Some(g)
}

/// Normal implied by the density field: `−∇σ / |∇σ|`.
///
/// `Ok(None)` flags a vanishing gradient (`|∇σ| < 1e-8`).
pub fn density_gradient_normal(grid: &VolumeGrid, x: Vec3) -> Result<Option<Vec3>> {
    let g = density_gradient(grid, x)
        .ok_or_else(|| Error::Domain(format!("{x} is not one voxel inside the grid bounds")))?;
    let len = g.length();
    Ok((len >= 1e-8).then(|| -g / len))
}

#[derive(Serialize, Deserialize)]
struct DecoderFile {
    version: u32,
    latent_dim: usize,
    weights: Vec<Vec<f64>>,
    bias: [f64; APPEARANCE_DIM],
}

/// Sidecar path holding the decoder: `scene.grid` → `scene.decoder.json`.
pub fn decoder_sidecar(path: &Path) -> PathBuf {
    path.with_extension("decoder.json")
}

pub fn encode_grid(grid: &VolumeGrid) -> Vec<u8> {
    let mut out = Vec::with_capacity(
        GRID_HEADER_BYTES + 4 * grid.voxel_count() * (4 + grid.latent_dim),
    );
    out.extend_from_slice(&GRID_MAGIC);
    out.extend_from_slice(&GRID_VERSION.to_le_bytes());
    for r in grid.resolution {
        out.extend_from_slice(&(r as u32).to_le_bytes());
    }
    out.extend_from_slice(&(grid.latent_dim as u32).to_le_bytes());
    for v in [grid.bounds.min, grid.bounds.max] {
        for c in v.to_array() {
            out.extend_from_slice(&(c as f32).to_le_bytes());
        }
    }
    out.resize(GRID_HEADER_BYTES, 0);
    for block in [&grid.raw_density, &grid.raw_normal, &grid.latent] {
        for v in block.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_grid(bytes: &[u8], path: &Path) -> Result<VolumeGrid> {
    if bytes.len() < GRID_HEADER_BYTES {
        return Err(Error::format(path, format!("file is {} bytes, shorter than the header", bytes.len())));
    }
    if bytes[0..4] != GRID_MAGIC {
        return Err(Error::format(path, "bad magic, not a microflake grid"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as f64;
    let version = u32_at(4);
    if version != GRID_VERSION {
        return Err(Error::format(path, format!("unsupported grid version {version}, expected {GRID_VERSION}")));
    }
    let resolution = [u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize];
    let latent_dim = u32_at(20) as usize;
    let min = Vec3::new(f32_at(24), f32_at(28), f32_at(32));
    let max = Vec3::new(f32_at(36), f32_at(40), f32_at(44));
    let bounds = Aabb::new(min, max).map_err(|e| Error::format(path, e.to_string()))?;
    let n = resolution.iter().try_fold(1usize, |a, &r| a.checked_mul(r)).filter(|&n| n > 0);
    let Some(n) = n else {
        return Err(Error::format(path, format!("invalid resolution {resolution:?}")));
    };
    if latent_dim == 0 {
        return Err(Error::format(path, "latent dimension is zero"));
    }
    let expected = GRID_HEADER_BYTES + 4 * n * (4 + latent_dim);
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!("payload size mismatch: {} bytes, expected {expected} for {resolution:?} x (4 + {latent_dim})", bytes.len()),
        ));
    }
    let floats: Vec<f32> = bytes[GRID_HEADER_BYTES..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let (raw_density, rest) = floats.split_at(n);
    let (raw_normal, latent) = rest.split_at(3 * n);
    Ok(VolumeGrid {
        resolution,
        bounds,
        latent_dim,
        raw_density: raw_density.to_vec(),
        raw_normal: raw_normal.to_vec(),
        latent: latent.to_vec(),
    })
}

/// Writes the binary grid and its decoder sidecar.
pub fn save_grid(grid: &VolumeGrid, decoder: &AppearanceDecoder, path: &Path) -> Result<()> {
    if decoder.latent_dim != grid.latent_dim {
        return Err(Error::Contract(format!(
            "decoder latent dimension {} does not match grid {}",
            decoder.latent_dim, grid.latent_dim
        )));
    }
    write_atomic(path, &encode_grid(grid))?;
    save_decoder(decoder, &decoder_sidecar(path))
}

pub fn load_grid(path: &Path) -> Result<(VolumeGrid, AppearanceDecoder)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let grid = decode_grid(&bytes, path)?;
    let decoder = load_decoder(&decoder_sidecar(path))?;
    if decoder.latent_dim != grid.latent_dim {
        return Err(Error::format(
            path,
            format!("decoder latent dimension {} does not match grid {}", decoder.latent_dim, grid.latent_dim),
        ));
    }
    Ok((grid, decoder))
}

pub fn save_decoder(decoder: &AppearanceDecoder, path: &Path) -> Result<()> {
    let file = DecoderFile {
        version: GRID_VERSION,
        latent_dim: decoder.latent_dim,
        weights: decoder.weights.chunks(decoder.latent_dim).map(<[f64]>::to_vec).collect(),
        bias: decoder.bias,
    };
    let text = serde_json::to_string_pretty(&file).expect("decoder serializes");
    write_atomic(path, text.as_bytes())
}

pub fn load_decoder(path: &Path) -> Result<AppearanceDecoder> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: DecoderFile = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    if file.version != GRID_VERSION {
        return Err(Error::format(path, format!("unsupported decoder version {}", file.version)));
    }
    if file.weights.len() != APPEARANCE_DIM || file.weights.iter().any(|r| r.len() != file.latent_dim) {
        return Err(Error::format(path, format!("decoder weights must be {APPEARANCE_DIM} x {}", file.latent_dim)));
    }
    Ok(AppearanceDecoder {
        latent_dim: file.latent_dim,
        weights: file.weights.concat(),
        bias: file.bias,
    })
}

/// Writes through a temporary sibling so readers never observe a partial file.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
