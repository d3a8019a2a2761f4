use std::path::{Path, PathBuf};

use ndgrad::GradError;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Malformed binary or JSON content.
    #[error("{}: format error at byte {offset}: {detail}", path.display())]
    Format {
        path: PathBuf,
        offset: u64,
        detail: String,
    },

    /// Well-formed content that breaks a domain invariant.
    #[error("{}: {detail}", path.display())]
    Validation { path: PathBuf, detail: String },

    /// Data needed to build an example or a forecast is missing.
    #[error("data error: {0}")]
    Data(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Training or fitting produced non-finite values.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("logistic fit failed (best sse {best_sse}): {detail}")]
    Fit { best_sse: f64, detail: String },

    /// An oracle quantity (future mean loss or histogram) was required but not granted.
    #[error("missing oracle input: {0}")]
    MissingOracle(String),

    #[error(transparent)]
    Grad(#[from] GradError),
}

impl Error {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
