//! Conditional diffusion models for translating real images between
//! experimental conditions: train a class-conditional noise predictor,
//! invert an image to its latent under its own condition, and regenerate it
//! under a target condition.

pub mod checkpoint;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod files;
pub mod nn;
pub mod pipeline;
pub mod sampler;
pub mod schedule;
pub mod seed;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
