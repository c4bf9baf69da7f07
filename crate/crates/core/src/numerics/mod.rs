//! Dense row-major tensors and a tape-based reverse-mode autodiff.
//!
//! All forward and backward computation in the crate goes through [`Graph`].
//! Weights held by the model are recorded as leaves (`param` for trainable
//! tensors, `constant_shared` for frozen ones); everything else is derived.

mod graph;
mod scalar;
mod tensor;

pub use graph::{top_k_indices, Gradients, Graph, Var, LAYER_NORM_EPS};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;
