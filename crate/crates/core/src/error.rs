use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: file length {len} is not a multiple of the {record}-byte record size")]
    TruncatedData { path: PathBuf, len: u64, record: usize },

    #[error("{path}: record {record} has label byte {label} (expected 0..=9)")]
    BadLabel { path: PathBuf, record: usize, label: u8 },

    #[error("checkpoint has bad magic bytes {0:?}")]
    BadMagic([u8; 8]),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at epoch {epoch}, step {step}; first non-finite values in layer `{layer}`")]
    NonFinite { epoch: usize, step: usize, layer: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("image output: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// True for errors caused by bad user input (flags, config values),
    /// as opposed to runtime failures (I/O, corrupt files, divergence).
    pub fn is_user_error(&self) -> bool {
        matches!(self, Error::InvalidArgument(_) | Error::Config(_))
    }
}
