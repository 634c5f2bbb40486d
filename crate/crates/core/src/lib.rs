//! Gesture-to-text translation pipeline: a vector-quantized motion
//! tokenizer, an alignment projection into a small decoder-only language
//! model, staged training schemes and the evaluation metric suite.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod fusion;
pub mod lm;
pub mod metrics;
pub mod motion;
pub mod pipeline;
pub mod schemes;
pub mod templates;
pub mod tensor;
pub mod vq;

pub use error::{Error, Result};
