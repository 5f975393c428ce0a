//! Single-image test-time adaptation for semantic segmentation.
//!
//! The crate implements six adaptation methods as iterative self-supervised
//! loss minimization with a per-image weight restart, the synthetic-corruption
//! corpus they are tuned on, per-image evaluation metrics, training of the two
//! auxiliary networks (mask refiner and IoU estimator) from adversarially
//! synthesized masks, and a grid-search/selection/analysis harness.
//!
//! All numeric code is generic over the scalar type through
//! [`scalar::Scalar`]; `f32` is the default lane for models and adaptation,
//! `f64` the lane used by oracles and gradient checks.

pub mod adapter;
pub mod attacks;
pub mod auxnets;
pub mod corruptions;
pub mod dataset;
pub mod error;
pub mod harness;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod scalar;
pub mod testbed;
pub mod tta;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default scalar lane for model inference and adaptation.
pub type DefaultScalar = f32;

pub type ImageF32 = image::ImagePlane<f32>;
pub type ImageF64 = image::ImagePlane<f64>;
pub type LogitsF32 = image::LogitMask<f32>;
pub type LogitsF64 = image::LogitMask<f64>;
pub type ProbsF32 = image::ProbMask<f32>;
pub type ProbsF64 = image::ProbMask<f64>;
