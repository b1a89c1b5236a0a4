use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("block index ({q}, {l}) out of range for {b1}x{b2} blocks")]
    Index { q: usize, l: usize, b1: usize, b2: usize },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("column {column} has zero variance")]
    ZeroVariance { column: usize },

    #[error("fit failed: {0}")]
    Fit(String),

    #[error("parse error at row {row}, column {col}: {message}")]
    Parse { row: usize, col: usize, message: String },

    #[error("validation error at row {row}, column {col}: {message}")]
    Validation { row: usize, col: usize, message: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
