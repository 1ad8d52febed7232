use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("tensor rank {0} exceeds the supported maximum of 4")]
    RankTooLarge(usize),

    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },

    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid attribute for {op}: {detail}")]
    InvalidAttribute { op: &'static str, detail: String },
}

pub type Result<T> = std::result::Result<T, AutodiffError>;
