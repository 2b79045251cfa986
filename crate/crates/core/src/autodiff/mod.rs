//! Dense tensors and a tape-based reverse-mode autodiff engine covering the
//! operations the vision transformer and its alignment losses need.

pub mod gradcheck;
mod graph;
pub mod suite;
mod tensor;

pub use graph::{gelu_grad_scalar, gelu_scalar, Graph, Var, COSINE_EPS};
pub use tensor::Tensor;

/// Layer-norm variance guard used throughout the model.
pub const LAYERNORM_EPS: f64 = 1e-6;
