use std::io;

use thiserror::Error;

/// Every failure the library can report.
#[derive(Debug, Error)]
pub enum EnkiError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("mask has no masked patches")]
    EmptyMask,

    #[error("mask leaves no visible patches for the encoder")]
    NoVisiblePatches,

    #[error("backward already ran on this graph; call reset_grads first")]
    BackwardTwice,

    #[error("loss is not connected to any tensor that requires a gradient")]
    DetachedGraph,

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("non-finite loss at step {step} (lr {lr:e}); gradient norms: {grad_norms}")]
    NonFinite {
        step: usize,
        lr: f64,
        grad_norms: String,
    },

    #[error("reconstruction of item {index} failed: {source}")]
    Item {
        index: usize,
        #[source]
        source: Box<EnkiError>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl EnkiError {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        EnkiError::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn format(offset: u64, message: impl Into<String>) -> Self {
        EnkiError::Format {
            offset,
            message: message.into(),
        }
    }

    pub(crate) fn invalid(message: impl Into<String>) -> Self {
        EnkiError::InvalidArgument(message.into())
    }
}

pub type Result<T> = std::result::Result<T, EnkiError>;
