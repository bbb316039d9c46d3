//! Gaussian noise-level estimation from pairs of noisy frames.
//!
//! Two independently noised captures of the same scene differ only by
//! noise, so their difference carries the noise level with the image
//! content cancelled out. This crate synthesizes such pairs, estimates σ
//! from the difference either analytically or with a small SqueezeNet
//! regressor trained from scratch, and reports estimation error per
//! dataset and noise level.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision used in the common paths.

pub mod error;
pub mod estimators;
pub mod eval;
pub mod image;
pub mod model;
pub mod nn;
pub mod rng;
pub mod scalar;
pub mod synth;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Images and difference rasters are handled in double precision.
pub type Image = image::Image<f64>;
pub type DifferenceImage = synth::DifferenceImage<f64>;
pub type NoisyFramePair = synth::NoisyFramePair<f64>;

/// Training precision.
pub type Tensor32 = nn::Tensor<f32>;
/// Gradient-check precision.
pub type Tensor64 = nn::Tensor<f64>;

/// Network trained and stored in single precision.
pub type Model = model::Model<f32>;
