//! Minimal differentiable compute kernel: tensors, a recording graph with a
//! fixed operation set, Adam, and analytic flop accounting.

mod adam;
pub mod flops;
mod graph;
mod params;
mod rng;
mod scalar;
mod tensor;

pub use adam::AdamState;
pub use graph::{Gradients, Graph, Mode, Var};
pub use params::ParamSet;
pub use rng::RngStream;
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
