//! Resumable optimizer snapshots.
//!
//! A checkpoint is a directory holding the grid (with its decoder sidecar),
//! the environment light, the optimizer configuration, and a little-endian
//! binary file with the optimizer moments, visibility and history.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::field::{load_grid, save_grid, write_atomic};
use crate::inverse::{Adam, HistoryRow, OptimizeConfig, State};
use crate::lighting::{load_env_sg, save_env_sg, VisibilityField, VisibilityLobe};
use crate::math::Vec3;

const MAGIC: [u8; 4] = *b"MFCK";
const VERSION: u32 = 1;
const GRID_FILE: &str = "scene.grid";
const ENV_FILE: &str = "env.sg";
const CONFIG_FILE: &str = "config.json";
const STATE_FILE: &str = "state.bin";

pub(crate) struct Checkpoint {
    pub state: State,
    pub config: OptimizeConfig,
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        v.iter().for_each(|x| self.f64(*x));
    }
    fn vec3(&mut self, v: Vec3) {
        v.to_array().iter().for_each(|x| self.f64(*x));
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format(self.path, "checkpoint state is truncated"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn len(&mut self) -> Result<usize> {
        let n = self.u64()? as usize;
        if n > self.bytes.len() {
            return Err(Error::format(self.path, "checkpoint length field out of range"));
        }
        Ok(n)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len()?;
        (0..n).map(|_| self.f64()).collect()
    }
    fn vec3(&mut self) -> Result<Vec3> {
        Ok(Vec3::new(self.f64()?, self.f64()?, self.f64()?))
    }
}

fn encode_state(state: &State) -> Vec<u8> {
    let mut w = Writer::default();
    w.0.extend_from_slice(&MAGIC);
    w.0.extend_from_slice(&VERSION.to_le_bytes());
    w.u64(state.iteration as u64);
    w.u64(state.history.len() as u64);
    for r in &state.history {
        w.u64(r.iter as u64);
        [r.l_c, r.l_sigma, r.l_z, r.l_s, r.total, r.psnr].iter().for_each(|v| w.f64(*v));
    }
    for a in &state.adam {
        [a.lr, a.beta1, a.beta2, a.eps].iter().for_each(|v| w.f64(*v));
        w.u64(a.t);
        w.f64s(&a.m);
        w.f64s(&a.v);
    }
    match &state.visibility {
        None => w.u64(0),
        Some(v) => {
            w.u64(1);
            v.resolution.iter().for_each(|r| w.u64(*r as u64));
            w.u64(v.lobes_per_voxel as u64);
            w.u64(v.lobes.len() as u64);
            for l in &v.lobes {
                w.vec3(l.axis);
                w.f64(l.sharpness);
                w.f64(l.amplitude);
            }
            w.u64(v.specular_directions.len() as u64);
            v.specular_directions.iter().for_each(|d| w.vec3(*d));
            w.u64(v.specular_transmittance.len() as u64);
            for t in &v.specular_transmittance {
                w.0.extend_from_slice(&t.to_le_bytes());
            }
        }
    }
    w.0
}

impl Checkpoint {
    pub fn from_state(state: &State, config: &OptimizeConfig) -> Self {
        Self {
            state: state.clone(),
            config: config.clone(),
        }
    }

    pub fn into_state(self) -> State {
        self.state
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_grid(&self.state.grid, &self.state.decoder, &dir.join(GRID_FILE))?;
        save_env_sg(&self.state.env, &dir.join(ENV_FILE))?;
        let config = serde_json::to_string_pretty(&self.config).expect("config serialises");
        write_atomic(&dir.join(CONFIG_FILE), config.as_bytes())?;
        write_atomic(&dir.join(STATE_FILE), &encode_state(&self.state))
    }

    /// Loads a checkpoint, refusing one written under a different
    /// configuration (only the iteration count may differ).
    pub fn load(dir: &Path, config: &OptimizeConfig) -> Result<Self> {
        let cfg_path = dir.join(CONFIG_FILE);
        let text = fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
        let saved: OptimizeConfig =
            serde_json::from_str(&text).map_err(|e| Error::format(&cfg_path, e.to_string()))?;
        let comparable = OptimizeConfig { iterations: config.iterations, ..saved.clone() };
        if comparable != *config {
            return Err(Error::Config(format!(
                "checkpoint {} was written with a different configuration",
                dir.display()
            )));
        }
        let (grid, decoder) = load_grid(&dir.join(GRID_FILE))?;
        let env = load_env_sg(&dir.join(ENV_FILE))?;
        let path = dir.join(STATE_FILE);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let mut r = Reader {
            bytes: &bytes,
            pos: 0,
            path: &path,
        };
        if r.take(4)? != MAGIC {
            return Err(Error::format(&path, "not a checkpoint state file"));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::format(&path, format!("unsupported checkpoint version {version}")));
        }
        let iteration = r.u64()? as usize;
        let rows = r.len()?;
        let mut history = Vec::with_capacity(rows);
        for _ in 0..rows {
            history.push(HistoryRow {
                iter: r.u64()? as usize,
                l_c: r.f64()?,
                l_sigma: r.f64()?,
                l_z: r.f64()?,
                l_s: r.f64()?,
                total: r.f64()?,
                psnr: r.f64()?,
            });
        }
        let mut adam = Vec::with_capacity(5);
        for _ in 0..5 {
            adam.push(Adam {
                lr: r.f64()?,
                beta1: r.f64()?,
                beta2: r.f64()?,
                eps: r.f64()?,
                t: r.u64()?,
                m: r.f64s()?,
                v: r.f64s()?,
            });
        }
        let visibility = if r.u64()? == 1 {
            let resolution = [r.u64()? as usize, r.u64()? as usize, r.u64()? as usize];
            let lobes_per_voxel = r.len()?;
            let n = r.len()?;
            let lobes = (0..n)
                .map(|_| {
                    Ok(VisibilityLobe {
                        axis: r.vec3()?,
                        sharpness: r.f64()?,
                        amplitude: r.f64()?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let nd = r.len()?;
            let specular_directions = (0..nd).map(|_| r.vec3()).collect::<Result<Vec<_>>>()?;
            let nt = r.len()?;
            let specular_transmittance = (0..nt)
                .map(|_| Ok(f32::from_le_bytes(r.take(4)?.try_into().unwrap())))
                .collect::<Result<Vec<_>>>()?;
            Some(VisibilityField {
                resolution,
                lobes_per_voxel,
                lobes,
                specular_directions,
                specular_transmittance,
            })
        } else {
            None
        };
        if r.pos != bytes.len() {
            return Err(Error::format(&path, "trailing bytes after checkpoint state"));
        }
        let adam: [Adam; 5] = adam.try_into().expect("five optimizer groups");
        if adam[0].m.len() != grid.voxel_count() || history.len() != iteration {
            return Err(Error::format(&path, "checkpoint state does not match its grid"));
        }
        Ok(Self {
            state: State {
                iteration,
                grid,
                decoder,
                env,
                visibility,
                adam,
                history,
            },
            config: saved,
        })
    }

    pub fn peek_iteration(dir: &Path) -> Result<usize> {
        let path = dir.join(STATE_FILE);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let mut r = Reader {
            bytes: &bytes,
            pos: 8,
            path: &path,
        };
        Ok(r.u64()? as usize)
    }
}
