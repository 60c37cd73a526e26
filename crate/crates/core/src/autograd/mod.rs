//! Minimal reverse-mode automatic differentiation over [`Tensor`](crate::tensor::Tensor)s.

pub mod kernels;
mod tape;

pub use tape::{Gradients, Tape, Var, COSINE_EPS};
