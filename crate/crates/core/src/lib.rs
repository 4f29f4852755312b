//! Cross-modal distillation of spike-model representations into LFP models,
//! with a synthetic ground-truth generator, the preprocessing pipeline and
//! the evaluation metrics.

pub mod bind;
pub mod config;
pub mod container;
pub mod data;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod preprocess;
pub mod synthgen;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
