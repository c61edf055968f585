use thiserror::Error;

/// Errors produced by every module of the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("insufficient points: need at least {needed}, got {got}")]
    InsufficientPoints { needed: usize, got: usize },

    #[error("inverted or degenerate cell: minimum sampled Jacobian determinant {min_det:e}")]
    InvertedCell { min_det: f64 },

    #[error("empty section")]
    EmptySection,

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("schema version mismatch: expected \"{expected}\", found \"{found}\"")]
    SchemaVersion { expected: String, found: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("linear solver did not converge: relative residual {residual:e} after {iterations} iterations")]
    SolverDiverged { residual: f64, iterations: usize },

    #[error("singular system: {0}")]
    Singular(String),

    #[error("invalid volume mesh: {0}")]
    InvalidVolumeMesh(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
