//! Scene manifest: the JSON file tying grid, decoder, light, cameras and
//! reference images together. Paths are relative to the manifest's directory.

use std::fs;
use std::path::{Path, PathBuf};

use microflake_core::camera::load_cameras;
use microflake_core::field::{decode_grid, load_decoder};
use microflake_core::image::read_pfm;
use microflake_core::lighting::load_env_sg;
use microflake_core::{AppearanceDecoder, Camera, EnvLight, Error, HdrImage, OptimizeConfig, Result, VolumeGrid};
use serde::{Deserialize, Serialize};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub grid: PathBuf,
    pub decoder: PathBuf,
    pub env: PathBuf,
    pub cameras: PathBuf,
    /// One per camera, in camera order. May be empty.
    #[serde(default)]
    pub images: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub held_out_cameras: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub novel_env: Option<PathBuf>,
    /// Optimizer config whose `render` and `visibility_fit` sections apply here.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub settings: Option<PathBuf>,
}

/// A manifest with every path resolved and checked.
pub struct LoadedManifest {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn load_config(path: &Path) -> Result<OptimizeConfig> {
    read_json(path)
}

impl LoadedManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let manifest: Manifest = read_json(path)?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: format!("manifest version {} is not {MANIFEST_VERSION}", manifest.version),
            });
        }
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let loaded = Self { dir, manifest };
        let m = &loaded.manifest;
        let mut required = vec![&m.grid, &m.decoder, &m.env, &m.cameras];
        required.extend(&m.images);
        required.extend(m.held_out_cameras.iter().chain(&m.novel_env).chain(&m.settings));
        for p in required {
            let full = loaded.resolve(p);
            if !full.is_file() {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    message: format!("referenced file {} does not exist", full.display()),
                });
            }
        }
        Ok(loaded)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.dir.join(p)
    }

    pub fn scene(&self) -> Result<(VolumeGrid, AppearanceDecoder)> {
        let path = self.resolve(&self.manifest.grid);
        let bytes = fs::read(&path).map_err(|source| Error::Io { path: path.clone(), source })?;
        let grid = decode_grid(&bytes, &path)?;
        let decoder = load_decoder(&self.resolve(&self.manifest.decoder))?;
        if decoder.latent_dim != grid.latent_dim {
            return Err(Error::Format {
                path,
                message: format!(
                    "decoder latent dimension {} does not match grid {}",
                    decoder.latent_dim, grid.latent_dim
                ),
            });
        }
        Ok((grid, decoder))
    }

    pub fn env(&self) -> Result<EnvLight> {
        load_env_sg(&self.resolve(&self.manifest.env))
    }

    pub fn cameras(&self) -> Result<Vec<Camera>> {
        load_cameras(&self.resolve(&self.manifest.cameras))
    }

    pub fn images(&self) -> Result<Vec<HdrImage>> {
        self.manifest.images.iter().map(|p| read_pfm(&self.resolve(p))).collect()
    }

    pub fn config(&self) -> Result<Option<OptimizeConfig>> {
        self.manifest.settings.as_ref().map(|p| load_config(&self.resolve(p))).transpose()
    }

    /// Absolute form of a manifest path, for manifests written elsewhere.
    pub fn absolute(&self, p: &Path) -> Result<PathBuf> {
        let full = self.resolve(p);
        full.canonicalize().map_err(|source| Error::Io { path: full, source })
    }
}

pub fn save_manifest(manifest: &Manifest, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    fs::write(path, text + "\n").map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}
