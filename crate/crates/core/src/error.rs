//! Error type shared across the pipeline.

use thiserror::Error;

/// Errors produced by the segmentation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// A file does not carry the expected magic or structure.
    #[error("format error: {0}")]
    Format(String),

    /// A file parsed but its contents are internally inconsistent.
    #[error("corruption error: {0}")]
    Corruption(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Raster/tensor dimensions do not satisfy an operation's contract.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Band counts or tensor shapes disagree.
    #[error("shape error: {0}")]
    Shape(String),

    /// Grids that must share a transform do not line up.
    #[error("alignment error: {0}")]
    Alignment(String),

    /// A class value falls outside the scheme.
    #[error("encoding error: {0}")]
    Encoding(String),

    /// Non-finite values where finite ones are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Invalid configuration values.
    #[error("config error: {0}")]
    Config(String),

    /// Invalid or empty input data.
    #[error("input error: {0}")]
    Input(String),

    /// Malformed vector geometry.
    #[error("geometry error: {0}")]
    Geometry(String),

    /// An operation was invoked before required state existed.
    #[error("state error: {0}")]
    State(String),

    /// Training aborted; carries epoch/batch diagnostics.
    #[error("training aborted: {0}")]
    Training(String),
}

impl Error {
    /// True for errors caused by bad inputs or configuration (CLI exit 2),
    /// false for runtime/numeric failures (CLI exit 3).
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Error::Io(_) | Error::Numeric(_) | Error::Training(_) | Error::Corruption(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
