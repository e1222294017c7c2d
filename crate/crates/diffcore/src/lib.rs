//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Graph`] records one forward pass over [`Tensor`] values and replays it
//! backwards to produce [`Gradients`] for every trainable leaf. Model weights
//! live in a [`ParamStore`]; frozen entries never receive gradients.
//! [`gradcheck`] verifies each operation against central differences.

mod error;
mod gradcheck;
mod graph;
mod kernels;
mod params;
mod scalar;
mod tensor;

pub use error::{DiffError, Result};
pub use gradcheck::{check_gradients, gradcheck, OpKind, STEP};
pub use graph::{Graph, Var};
pub use params::{Gradients, Param, ParamId, ParamStore};
pub use scalar::{lit, Scalar};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
