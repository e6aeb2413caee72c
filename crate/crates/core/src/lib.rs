//! Dual-embedding attention models on a minimal reverse-mode autodiff
//! engine: the cross-pooled text classifier, the two-stream transformer
//! encoder-decoder with shared K/V projections and cross-stream
//! normalization, and the training/evaluation harness around them.

pub mod checkpoint;
pub mod classifier;
pub mod config;
pub mod embeddings;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod params;
pub mod real;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod training;
pub mod transformer;

pub use error::{Error, Result};
