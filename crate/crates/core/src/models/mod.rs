//! Canonical generator, motion encoder, deformation generator and
//! discriminator.

mod bundle;
mod config;
pub mod disc;
pub mod generator;
mod layers;

pub use bundle::{sidecar_path, GeneratorBundle, Latents, Sample};
pub use config::{InitMode, ModelConfig};
pub use disc::{disc_forward, discriminate, encode_times, init_discriminator, reset_head, trunk_forward};
pub use generator::{anchor_noise, canonical_forward, deformation_forward, deformation_style, motion_forward, CanonicalVars, Conditioning};
