//! Core library for distilling a compact audio encoder into a shared
//! audio-text latent space, pruning that space, and classifying audio
//! zero-shot against text-derived class anchors.

pub mod adam;
pub mod distill;
pub mod encoder;
pub mod error;
pub mod frontend;
pub mod gradcheck;
pub mod ops;
pub mod prune;
pub mod rng;
pub mod scalar;
pub mod store;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod wav;
pub mod zeroshot;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Production-width tensor.
pub type Tensor32 = tensor::Tensor<f32>;
/// Verification-width tensor used by gradient checks.
pub type Tensor64 = tensor::Tensor<f64>;
