use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration: unknown preset, bad key, out-of-range value.
    #[error("configuration error: {0}")]
    Config(String),

    /// An operation was called with arguments violating its preconditions.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A data file does not match the expected binary layout.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// Tensor shapes disagree with the configuration or with each other.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Checkpoint file written by an incompatible format version.
    #[error("checkpoint version mismatch: found {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    /// Training produced a non-finite loss; diagnostic state was dumped.
    #[error("non-finite loss at generation {generation}, epoch {epoch}, step {step} (state dump: {dump})")]
    NonFiniteLoss {
        generation: usize,
        epoch: usize,
        step: usize,
        dump: PathBuf,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn argument(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }
}
