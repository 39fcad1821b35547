//! Dense `f64` tensors, reverse-mode autodiff, deterministic randomness and
//! the small dense linear algebra the diagnostics need.

mod graph;
mod kernels;
mod mask;
mod rng;
mod tensor;

pub mod check;
pub mod linalg;

pub use graph::{Graph, Var};
pub use mask::Mask;
pub use rng::{stream_key, Rng, RngState};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
