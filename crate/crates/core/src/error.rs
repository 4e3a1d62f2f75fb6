use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config field `{field}`: {reason}")]
    InvalidField { field: String, reason: String },

    #[error("unknown model size preset `{0}` (expected one of S, B, M, L, XL, H)")]
    UnknownPreset(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("resolution {resolution} unsupported by extractor `{extractor}`")]
    UnsupportedResolution { extractor: String, resolution: usize },

    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: u64, detail: String },

    #[error("frozen weights were modified: {0}")]
    FrozenMutated(String),

    #[error("matrix square root failed: {0}")]
    MatrixRoot(String),

    #[error("{0}")]
    Data(String),

    #[error(transparent)]
    Candle(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(field: &str, reason: impl Into<String>) -> Error {
    Error::InvalidField { field: field.to_string(), reason: reason.into() }
}
