//! Reverse-mode differentiation over dense rank-4 arrays.

mod adam;
pub mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod params;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use graph::{sigmoid, softplus, Gradients, Graph, Var};
pub use kernels::Precision;
pub use params::{GradMap, ParamStore};
