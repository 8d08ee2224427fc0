//! Dense tensors, reverse-mode differentiation and the Adam optimizer.

mod adam;
mod graph;
pub(crate) mod kernels;
mod params;
mod tensor;

pub mod gradcheck;

pub use adam::{AdamConfig, AdamState};
pub use graph::{AttnShape, Gradients, Graph, RowMixing, Var, LAYER_NORM_EPS};
pub use params::{ParamEntry, ParamId, ParamStore};
pub use tensor::{Scalar, Tensor};
