//! Reversible adversarial example generation.
//!
//! An invertible generator perturbs images so that an ensemble of classifiers
//! misreads them, even after common preprocessing, while the inverse pass
//! restores the original up to 8-bit quantization noise.

pub mod battery;
pub mod checkpoint;
pub mod config;
pub mod coupling;
pub mod data;
pub mod defense_sim;
pub mod error;
pub mod eval;
pub mod generator;
pub mod haar;
pub mod imageio;
pub mod jpeg;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod resample;
pub mod targets;
pub mod training;

pub use error::{RaegError, Result};
