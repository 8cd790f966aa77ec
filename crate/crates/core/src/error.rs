//! Crate-wide error type.
//!
//! One enum keeps the CLI's exit-code mapping simple: configuration and
//! usage problems exit 2, everything else exits 1.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad configuration value or schema violation (CLI exit code 2).
    #[error("configuration error: {0}")]
    Config(String),

    /// Array shape or grid mismatch.
    #[error("shape error: {0}")]
    Shape(String),

    /// Violated operation precondition.
    #[error("precondition error: {0}")]
    Precondition(String),

    /// NaN/Inf or other numeric failure.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Phantom generation failed (e.g. empty bone after cutting).
    #[error("generation error: {0}")]
    Generation(String),

    /// Malformed file contents (volume, manifest, checkpoint).
    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Exit code for the CLI: 2 for config/usage problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            _ => 1,
        }
    }
}
