//! Masked-autoencoder reconstruction of sea-surface-temperature cutouts.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: dense `f64` tensors and a reverse-mode tape.
//! - [`patching`]: patch sequences, random and block masks, sin-cos positions.
//! - [`model`]: the ViT masked autoencoder and its masked-MSE loss.
//! - [`training`]: AdamW with warmup + cosine decay, train loop, checkpoints.
//! - [`data`]: synthetic power-law SST-anomaly cutouts and the `ENKD` stack format.
//! - [`pipeline`]: mask → encode → decode → composite, offsets and bias correction.
//! - [`evaluation`]: masked-pixel RMSE, bias, position maps, σ_T and complexity bins.
//! - [`cli`]: the command implementations behind the `enki` binary.

pub mod cli;
pub mod data;
pub mod error;
pub mod evaluation;
mod format;
pub mod model;
pub mod numerics;
pub mod patching;
pub mod pipeline;
pub mod rng;
pub mod training;

pub use error::{EnkiError, Result};
pub use format::Dtype;
