use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the core library.
#[derive(Debug, Error)]
pub enum Error {
    /// A precondition on values or shapes was violated.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("IDX parse error in {path}: {kind}")]
    Idx { path: PathBuf, kind: IdxError },

    #[error("dataset cache error: {0}")]
    Cache(String),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

/// The distinct ways an IDX file can be malformed.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IdxError {
    #[error("wrong magic number 0x{found:08x} (expected 0x{expected:08x})")]
    BadMagic { expected: u32, found: u32 },
    #[error("file truncated at byte offset {offset} (needed {needed} bytes, file has {len})")]
    Truncated { offset: usize, needed: usize, len: usize },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {label} at index {index} is outside 0..{classes}")]
    LabelOutOfRange { index: usize, label: u8, classes: usize },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}

pub(crate) fn shape(context: &'static str, expected: impl ToString, actual: impl ToString) -> Error {
    Error::Shape {
        context,
        expected: expected.to_string(),
        actual: actual.to_string(),
    }
}
