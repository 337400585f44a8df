use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("backward already ran on this tape; record a new forward pass first")]
    TapeConsumed,

    #[error("optimizer step requested but gradients are not populated")]
    GradientsMissing,

    #[error("training diverged: non-finite loss at batch {batch} of epoch {epoch}")]
    Diverged { epoch: usize, batch: usize },

    #[error("pattern bank hash mismatch: checkpoint {checkpoint}, bank {bank}")]
    BankMismatch { checkpoint: String, bank: String },

    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
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

    /// Short machine-readable tag, used by the CLI's one-line error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::NonFinite(_) => "non_finite",
            Error::Invalid(_) => "invalid",
            Error::TapeConsumed => "tape",
            Error::GradientsMissing => "gradients",
            Error::Diverged { .. } => "diverged",
            Error::BankMismatch { .. } => "bank_mismatch",
            Error::Format { .. } => "format",
            Error::Io { .. } => "io",
            Error::Csv(_) => "csv",
        }
    }
}
