//! Crate-wide error type.

use crate::tensor::{Dtype, Shape};

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch at {site}: expected {expected}, got {got}")]
    ShapeMismatch {
        site: &'static str,
        expected: Shape,
        got: Shape,
    },

    #[error("dtype mismatch at {site}: {a:?} vs {b:?}")]
    DtypeMismatch { site: &'static str, a: Dtype, b: Dtype },

    #[error("invalid argument: {0}")]
    InvalidArg(String),

    #[error("non-finite values detected in {site}")]
    NonFinite { site: String },

    #[error("signal collapse in block {block_index} ({site})")]
    Collapse { block_index: usize, site: String },

    #[error("training collapsed at step {step}: {reason}")]
    TrainCollapse { step: usize, reason: String },

    #[error("no closed-form gain for {activation}; use estimate_activation_std")]
    NoClosedFormGain { activation: String },

    #[error("unknown model variant `{0}`")]
    UnknownVariant(String),

    #[error("gradient for parameter `{name}` is non-finite")]
    NonFiniteGradient { name: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArg(msg.into())
    }
}
