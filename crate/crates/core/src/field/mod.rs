//! Differentiable geometry: coordinate grids, bilinear backward warping,
//! deformation-to-flow conversion and the edge-aware temporal smoothness
//! loss.
//!
//! Coordinates are in pixel units with the origin at the centre of the
//! top-left pixel, `x` to the right and `y` downwards. A deformation field
//! stores per-output-pixel offsets: output pixel `m` samples the canonical
//! image at `m + offset(m)`.

mod flow;
mod grid;
mod types;
mod warp;

pub use flow::{
    edge_weights, flow_between, smoothness_kernel, smoothness_loss, SmoothnessLoss,
    DEFAULT_EDGE_BETA,
};
pub use grid::{identity_grid, CoordinateGrid};
pub use types::{CanonicalImage, DeformationField, FlowField, VideoClip, WeightMap};
pub use warp::{warp, warp_batch, warp_batch_backward, warp_gradients, warp_sample, warp_sample_backward};
