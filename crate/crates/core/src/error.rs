use std::path::PathBuf;

use numgrad::NumError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid {what}: {detail}")]
    Invalid { what: &'static str, detail: String },
    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error("missing {stage} artifact: {path}")]
    MissingStage { stage: &'static str, path: PathBuf },
    #[error("{0} stage is not trained")]
    Untrained(&'static str),
    #[error("{stage} diverged at step {step}: {detail}")]
    Diverged {
        stage: &'static str,
        step: usize,
        detail: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Num(#[from] NumError),
}

impl Error {
    pub(crate) fn invalid(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Invalid {
            what,
            detail: detail.into(),
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

    /// Errors caused by bad user input rather than by a failing run.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Invalid { .. } | Error::Format { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
