use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("design matrix is rank deficient (smallest/largest singular value = {ratio:.3e})")]
    RankDeficient { ratio: f64 },

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("sampler failure in chain {chain} at iteration {iteration}: {message}")]
    Sampler {
        chain: usize,
        iteration: usize,
        message: String,
    },

    #[error("convergence gate failed: R-hat {rhat:.4} for `{parameter}` (threshold {threshold})")]
    Convergence {
        parameter: String,
        rhat: f64,
        threshold: f64,
    },

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("missing centroid for cluster {0}")]
    MissingCentroid(i64),

    #[error("data error: {0}")]
    Data(String),

    #[error("too many non-convergent replicates for {model}: {failed} of {total}")]
    ExcessiveNonConvergence {
        model: String,
        failed: usize,
        total: usize,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn dims(msg: impl Into<String>) -> Self {
        Error::DimensionMismatch(msg.into())
    }
}
