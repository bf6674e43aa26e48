//! Heterogeneous feature distillation for SAR segmentation, end to end and
//! self-contained: a reverse-mode tensor engine, the neural building blocks,
//! an encoder-decoder segmentation backbone, offset-based feature alignment,
//! temperature-softmax feature distillation, training, evaluation metrics,
//! and a procedural generator of paired EO/SAR scenes.
//!
//! Numeric kernels are generic over the element type: [`f32`] for training
//! runs, [`f64`] for the finite-difference gradient checks.

pub mod backbone;
pub mod error;
pub mod gradcheck;
pub mod hfam;
pub mod hfdm;
pub mod layers;
mod linalg;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod scalar;
pub mod synthdata;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::{Dtype, Scalar};
pub use tensor::{grad_check, ops, Tape, Tensor};

/// Training-precision tensor.
pub type Tensor32 = Tensor<f32>;
/// Verification-precision tensor.
pub type Tensor64 = Tensor<f64>;
