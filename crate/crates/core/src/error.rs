//! Error taxonomy shared by the whole crate.
//!
//! Variants are grouped by where the fault lies: `Format`/`Integrity` cover
//! on-disk scene and checkpoint material, `Argument`/`Config` cover caller
//! input, `Numeric` covers NaN/Inf escapes in training, and `Io`/`Json` wrap
//! the underlying system errors with the path that failed.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A file or directory does not match the documented layout.
    #[error("format error: {0}")]
    Format(String),

    /// Stored sizes, counts, or checksums disagree with the manifest.
    #[error("integrity error: {0}")]
    Integrity(String),

    /// Input values are structurally valid but unusable (e.g. empty batch).
    #[error("data error: {0}")]
    Data(String),

    /// A function argument violates its contract.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A configuration value or combination of values is rejected.
    #[error("config error: {0}")]
    Config(String),

    /// An operation was called in the wrong order or mode.
    #[error("state error: {0}")]
    State(String),

    /// A loss or metric term became NaN or infinite; names the term.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A metric has no defined value for the given inputs.
    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("json error in {path}: {message}")]
    Json { path: PathBuf, message: String },
}

impl Error {
    /// Wraps an io::Error with the path that was being touched.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Wraps a serde_json error with the file it came from.
    pub fn json(path: impl Into<PathBuf>, err: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            message: err.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
