use thiserror::Error;

pub type Result<T> = std::result::Result<T, TmeError>;

#[derive(Debug, Error)]
pub enum TmeError {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("normal matrix is rank deficient along mode {mode}")]
    RankDeficient { mode: usize },

    #[error("rank {rank} exceeds dimension {dim} along mode {mode}")]
    RankExceedsDimension { mode: usize, rank: usize, dim: usize },

    #[error("no admissible rank: none of {evaluated} candidates passed the sparsity threshold {threshold}")]
    NoAdmissibleRank { evaluated: usize, threshold: f64 },

    #[error("sample size {n} violates the necessary existence bound {bound:.4}")]
    ExistenceViolated { n: usize, bound: f64 },

    #[error("non-finite log-likelihood in loop {loop_index} at iteration {iteration}")]
    NonFiniteLikelihood { loop_index: usize, iteration: usize },

    #[error("reference has zero Frobenius norm")]
    ZeroNormTruth,

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl TmeError {
    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        TmeError::Parse {
            line,
            message: message.into(),
        }
    }
}
