//! Dense tensors, reverse-mode differentiation and the AdamW optimizer.

mod array;
pub mod gradcheck;
mod graph;
pub mod nn;
mod optim;
mod params;
mod real;

pub use array::{Result, Tensor, TensorError};
pub use graph::{softmax_values, AttnMask, Graph, Var, MASK_SENTINEL};
#[cfg(test)]
pub(crate) use graph::{GELU_A, GELU_C};
pub use optim::{AdamW, AdamWConfig};
pub use params::{Gradients, ParamId, ParamStore};
pub use real::Real;
