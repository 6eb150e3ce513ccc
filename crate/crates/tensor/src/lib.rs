//! Minimal NCHW tensor library with tape-based reverse-mode autodiff, the
//! convolution family needed by image-to-image networks, and Adam.
//!
//! Everything is generic over [`Scalar`] (`f32` or `f64`). Kernels are
//! single-threaded and run in a fixed order, so results are bit-reproducible.

mod graph;
pub mod kernels;
mod optim;
mod params;
mod scalar;
mod tensor;

pub use graph::{bce_with_logit, sigmoid, Graph, PadMode, Var};
pub use optim::{Adam, AdamState};
pub use params::{Gradients, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("parameter error: {0}")]
    Param(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
