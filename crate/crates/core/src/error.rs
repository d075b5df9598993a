use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two operands disagree on shape.
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A video or latent axis violates a divisibility or size rule.
    #[error("shape error on {axis} axis: {detail}")]
    Shape { axis: &'static str, detail: String },

    /// A precondition of an operation was violated.
    #[error("contract violation in {op}: {detail}")]
    Contract { op: &'static str, detail: String },

    /// The synthetic pipeline rejected a scene; the caller should regenerate.
    #[error("pipeline skip: {0}")]
    Skip(String),

    /// A file did not match the expected binary or text layout.
    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("config error: {0}")]
    Config(String),

    /// Training produced a non-finite loss.
    #[error("non-finite loss at step {step} (grad norm {grad_norm})")]
    NonFinite { step: u64, grad_norm: f64 },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// An error tagged with the dataset record it occurred in.
    #[error("record {id}: {source}")]
    Record {
        id: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Contract {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn dims(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }

    /// Short category name used by the command-line front end.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Dimension { .. } | Error::Shape { .. } => "shape",
            Error::Contract { .. } => "contract",
            Error::Skip(_) => "skip",
            Error::Format { .. } => "format",
            Error::Config(_) => "config",
            Error::NonFinite { .. } => "numeric",
            Error::Io { .. } => "io",
            Error::Record { source, .. } => source.category(),
        }
    }
}
