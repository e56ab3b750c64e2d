//! Training engine for small CNNs whose convolutions run through the frequency
//! domain and carry a learnable, binarized spectral mask.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: unitary 2D DFTs and the small amount of plane plumbing
//!   needed to realise linear convolution with circular transforms.
//! - [`spectral_conv`]: the masked spectral convolution layer, its
//!   straight-through backward pass and the mask optimizer step.
//! - [`network`]: the remaining layers, loss, optimizer and the LeNet /
//!   residual architectures.
//! - [`data`]: CIFAR-10 binary ingestion, normalization, augmentation and the
//!   corruption suite.
//! - [`harness`]: training / evaluation loops, mask reports, checkpoints and
//!   metrics.

pub mod data;
pub mod error;
pub mod harness;
pub mod network;
pub mod numerics;
pub mod rng;
pub mod spectral_conv;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;

/// Storage precision for tensors and parameters.
#[cfg(not(feature = "f64"))]
pub type Real = f32;
/// Storage precision for tensors and parameters.
#[cfg(feature = "f64")]
pub type Real = f64;
