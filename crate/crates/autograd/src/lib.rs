//! Minimal reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Everything is two-dimensional; vectors are `1 x n` rows and scalars `1 x 1`.

pub mod functional;
mod graph;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;
