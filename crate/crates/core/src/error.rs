//! Crate-wide error type.

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input shorter than the minimum the operation needs.
    #[error("input too short: need at least {needed} samples, got {got}")]
    TooShort { needed: usize, got: usize },

    /// A value that must be finite is NaN or infinite.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Invalid configuration (bad parameter combination).
    #[error("configuration error: {0}")]
    Config(String),

    /// Tensor/vector dimensions do not conform.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Binary label outside {0, 1}.
    #[error("invalid label {0}: must be 0 or 1")]
    InvalidLabel(u8),

    /// Pooling kind used on the wrong side, or an unknown kind name.
    #[error("pooling kind error: {0}")]
    PoolingKind(String),

    /// An operation over a sequence received zero frames.
    #[error("empty sequence: {0}")]
    EmptySequence(String),

    /// Event asset with zero energy cannot be scaled to a target EBR.
    #[error("unusable event asset: {0}")]
    UnusableAsset(String),

    /// Event placement does not fit inside the background clip.
    #[error("placement out of range: {0}")]
    PlacementOutOfRange(String),

    /// Mixing inputs disagree on sample rate.
    #[error("sample rate mismatch: {a} Hz vs {b} Hz")]
    SampleRateMismatch { a: u32, b: u32 },

    /// A referenced file, asset, or parameter does not exist.
    #[error("not found: {0}")]
    NotFound(String),

    /// Malformed file contents (manifest, checkpoint, CSV, WAV, ...).
    #[error("format error: {0}")]
    Format(String),

    /// Training aborted (non-finite loss, empty batch, ...).
    #[error("training error: {0}")]
    Training(String),

    /// Generic invalid input not covered by a more specific variant.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors a caller caused by handing in bad arguments, paths,
    /// or configuration; the CLI maps these to exit code 1 and everything
    /// else to exit code 2.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::TooShort { .. }
                | Error::Config(_)
                | Error::ShapeMismatch(_)
                | Error::InvalidLabel(_)
                | Error::PoolingKind(_)
                | Error::NotFound(_)
                | Error::Format(_)
                | Error::InvalidInput(_)
        )
    }
}
