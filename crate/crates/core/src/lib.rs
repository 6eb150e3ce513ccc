//! In-silico fluorescence labeling: predicts four organelle channels
//! (mitochondria, nucleus, tubulin, actin) from one transmitted-light image.
//!
//! The pipeline trains a multi-head pix2pix (or UNet++) generator on
//! partially labelled data, where each sample only contributes loss for the
//! organelles it has ground truth for. Everything numeric is generic over
//! [`Scalar`]; [`Real`] is the precision used by the command-line tools.

pub mod dataset;
pub mod domain;
pub mod inference;
mod error;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod sampler;
pub mod synthgen;
pub mod trainer;
pub mod transforms;

pub use error::{IslError, Result};
pub use islab_tensor::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};

/// Default floating-point precision.
pub type Real = f64;
/// Network at the default precision.
pub type RealNetwork = models::Network<Real>;
/// Training patch at the default precision.
pub type RealPatch = transforms::PatchPair<Real>;
