use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("{context}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {format} data in {path}: {detail}")]
    Format {
        format: &'static str,
        path: PathBuf,
        detail: String,
    },

    #[error("checkpoint {path}: {detail}")]
    Checkpoint { path: PathBuf, detail: String },

    #[error("empty evaluation mask")]
    EmptyMask,

    #[error("least-squares design matrix is rank deficient")]
    RankDeficient,

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error(transparent)]
    Autodiff(#[from] dr_autodiff::AutodiffError),
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
