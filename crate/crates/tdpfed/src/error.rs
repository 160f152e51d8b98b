//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by the simulator library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("mode {mode} out of range for {ndim}-mode tensor")]
    ModeOutOfRange { mode: usize, ndim: usize },

    #[error("shape mismatch in {context}: {detail}")]
    ShapeMismatch {
        context: &'static str,
        detail: String,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite value at round {round}, client {client}, layer {layer}: {what}")]
    NumericDivergence {
        round: usize,
        client: usize,
        layer: usize,
        what: String,
    },

    #[error("bad IDX magic at byte {offset}: expected 0x{expected:08X}, got 0x{actual:08X}")]
    IdxBadMagic {
        offset: usize,
        expected: u32,
        actual: u32,
    },

    #[error("truncated IDX file at byte {offset}: expected {expected} bytes total, got {actual}")]
    IdxTruncated {
        offset: usize,
        expected: usize,
        actual: usize,
    },

    #[error("IDX count mismatch: {images} images vs {labels} labels")]
    IdxCountMismatch { images: usize, labels: usize },

    #[error("empty shard for client {client}")]
    EmptyShard { client: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Shorthand for shape-mismatch errors.
    pub(crate) fn shape(context: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            context,
            detail: detail.into(),
        }
    }
}
