//! Channel-attention encoder-decoder transformer for single-channel
//! image-to-image translation, with everything needed to train and evaluate
//! it on CPU: a reverse-mode autodiff tape, the network blocks, image-quality
//! metrics and significance tests, a synthetic paired-volume generator, an
//! AdamW training loop, and an evaluation/benchmark harness.

pub mod cli;
pub mod config;
pub mod error;
pub mod evalharness;
pub mod field;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod par;
pub mod synthdata;
pub mod tensor;
pub mod training;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use field::FieldStrength;
pub use tensor::{Shape, Tape, Tensor, Var};
