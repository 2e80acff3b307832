//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input violated a mathematical precondition (bad label, non-finite
    /// value, mismatched vector lengths).
    #[error("domain error: {0}")]
    Domain(String),

    /// Tensor shapes do not line up.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// API misuse (stale cache, scheduler fed the wrong observations).
    #[error("usage error: {0}")]
    Usage(String),

    /// Training produced a non-finite loss or gradient; the run aborts.
    #[error("training diverged: {0}")]
    Divergence(String),

    /// Experiment or transfer configuration is inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    /// Checkpoint file carries an unsupported format version.
    #[error("incompatible checkpoint: format_version {found} (supported: {supported})")]
    CheckpointVersion { found: u32, supported: u32 },

    /// File contents could not be parsed.
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    /// Malformed CSV row.
    #[error("csv error at line {line}: {message}")]
    Csv { line: u64, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
