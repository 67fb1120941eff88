use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("invalid region: {0}")]
    InvalidRegion(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unknown concept `{0}`")]
    UnknownConcept(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("validation error for image `{image_id}`: {msg}")]
    Validation { image_id: String, msg: String },

    #[error("cache format error: {0}")]
    Format(#[from] FormatError),

    #[error("value outside domain: {0}")]
    Domain(String),

    #[error("training diverged at epoch {epoch}: {msg}")]
    Divergence { epoch: usize, msg: String },

    #[error("missing input `{}`", .0.display())]
    MissingInput(PathBuf),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Structured failures when decoding a cache file.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated file: {0}")]
    Truncated(String),
    #[error("{0} trailing bytes after last record")]
    TrailingBytes(usize),
    #[error("invalid record: {0}")]
    InvalidRecord(String),
}
