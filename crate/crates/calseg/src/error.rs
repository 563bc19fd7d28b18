//! Crate-wide error type.
//!
//! Every fallible operation in the crate returns [`Result`]. Variants carry
//! enough context to identify the offending call site without a backtrace:
//! shape errors name the operation and the shapes involved, file errors name
//! the path.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shapes are incompatible for the named operation.
    #[error("{op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// Reverse-mode differentiation requires a single-element root.
    #[error("backward requires a scalar root, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },

    /// A tensor recorded on one graph was used with a different graph.
    #[error("tensor belongs to a different graph")]
    GraphMismatch,

    /// The feature tensor handed to the Fisher penalty must be a graph leaf
    /// so that its gradient is well defined and the encoder stays out of the
    /// differentiation path.
    #[error("feature tensor must be a detached graph leaf")]
    NotALeaf,

    /// A scalar argument is outside its documented domain.
    #[error("{0}")]
    InvalidArgument(String),

    /// A loss component evaluated to NaN or infinity during training.
    #[error("non-finite {component} component at step {step}")]
    NonFinite { component: &'static str, step: usize },

    /// Underlying I/O failure, tagged with the path being touched.
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file exists but its contents do not decode (bad magic, truncated
    /// payload, unsupported version).
    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },

    /// Configuration parsing or validation failure.
    #[error("config: {0}")]
    Config(String),

    /// Corpus or split bookkeeping failure (missing samples, empty splits).
    #[error("data: {0}")]
    Data(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Shortcut for shape errors so call sites stay on one line.
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    /// Shortcut for I/O errors tagged with a path.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Shortcut for format errors tagged with a path.
    pub fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format { path: path.into(), detail: detail.into() }
    }
}
