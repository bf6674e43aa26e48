//! Neural building blocks: convolution, batch normalization, activations,
//! and bilinear interpolation, with their parameter containers.

mod bilinear;
mod conv;
mod init;
mod norm;

pub use bilinear::bilinear_interpolate;
pub use conv::{conv2d, Conv2dParams};
pub use init::{seeded_rng, uniform_tensor};
pub use norm::{batchnorm, BatchNormParams};

// Activations are plain tensor ops; re-exported here because they are part
// of the layer vocabulary.
pub use crate::tensor::ops::{relu, sigmoid};

/// Whether normalization uses batch statistics (updating the running ones)
/// or the stored running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}
