//! Conditional prompt synthesis for zero-shot anomaly detection.
//!
//! A frozen vision encoder yields a global feature and per-patch features for
//! each image. Learnable dual (normal / anomaly) prompts are completed with
//! visual prototypes extracted by cross-attention and with class tokens drawn
//! from a small VAE, encoded by a text transformer with deep prompts, and
//! compared against the image features to give an image score and a pixel
//! anomaly map.

pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod ests;
pub mod icts;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod params;
pub mod prompts;
pub mod saga;
pub mod tensor;
pub mod training;

pub use error::{CopsError, Result};
pub use tensor::Tensor;
