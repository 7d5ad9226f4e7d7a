//! Reverse-mode automatic differentiation over dense row-major tensors.
//!
//! Only the operations the denoising network and the ranking losses need
//! are provided. Broadcasting is limited to exact shapes, scalars and a
//! single row against a matrix.

mod graph;
pub mod gradcheck;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub(crate) use graph::softmax_in_place;
pub use tensor::{Real, Tensor};
