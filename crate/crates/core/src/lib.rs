//! Differentiable microflake volume rendering.
//!
//! The scene is an explicit voxel field of density, microflake orientation and
//! a latent appearance code decoded to albedo and SGGX roughness. It is lit by
//! a spherical-Gaussian environment and rendered by single-scatter ray
//! marching. The [`inverse`] module fits all of it back to posed images.

pub mod camera;
mod checkpoint;
pub mod error;
pub mod field;
pub mod image;
pub mod inverse;
pub mod lighting;
pub mod math;
pub mod phase;
pub mod renderer;
pub mod sggx;
pub mod synthetic;

pub use camera::{Camera, Ray};
pub use error::{Error, Result};
pub use field::{AppearanceDecoder, FieldSample, VolumeGrid};
pub use image::HdrImage;
pub use inverse::{
    GradientBuffer, LossBreakdown, LossTerms, LossWeights, OptimizeConfig, OptimizeResult, TrainView,
};
pub use lighting::{EnvLight, SgLobe, VisibilityField, VisibilityLobe};
pub use math::{Rgb, Vec3};
pub use phase::PhaseWeights;
pub use renderer::{AlbedoRemap, RenderSettings, Renderer, VisibilityMode};
pub use sggx::{MicroflakeParams, SggxMatrix};
