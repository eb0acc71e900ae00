use thiserror::Error;

#[derive(Debug, Error)]
pub enum ZdpError {
    #[error("non-finite value at ({row}, {col})")]
    NonFinite { row: usize, col: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no null directions to probe")]
    EmptyNullSpace,

    #[error("undefined ratio: perturbed activations have zero energy")]
    UndefinedRatio,

    #[error("columns are not orthonormal (max deviation {0:.3e})")]
    NotOrthonormal(f64),

    #[error("matrix is not symmetric positive semidefinite: {0}")]
    NotPsd(String),

    #[error("sample size too small for ratio bound (denominator {0:.6})")]
    RatioDenominator(f64),

    #[error("rank collapse in QR at column {column} (|r_jj| = {pivot:.3e})")]
    RankCollapse { column: usize, pivot: f64 },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("{0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, ZdpError>;
