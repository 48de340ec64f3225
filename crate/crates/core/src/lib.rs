//! Video generation by warping one generated canonical image with a generated
//! per-frame deformation field.
//!
//! The crate is organised bottom-up:
//!
//! * [`field`]: coordinate grids, bilinear backward warping, flows derived
//!   from deformation fields and the edge-aware temporal smoothness loss.
//! * [`autodiff`]: a small tape-based reverse-mode engine over rank-4 arrays,
//!   parameter stores, Adam and the finite-difference gradient gate.
//! * [`models`]: canonical generator, deformation generator, motion encoder
//!   and the sparse-frame video discriminator.
//! * [`train`]: image pretraining, video fine-tuning and single-clip fitting.
//! * [`data`]: procedural sprite videos with ground-truth trajectories.
//! * [`propagate`]: edit, mask and point propagation from the canonical image.
//! * [`experiment`]: bundle evaluation and the ablation harness.
//! * [`metrics`]: Fréchet distance on hand-crafted frame descriptors and
//!   temporal jerk diagnostics.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod experiment;
pub mod field;
pub mod gdf;
pub mod metrics;
pub mod models;
pub mod par;
pub mod propagate;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
