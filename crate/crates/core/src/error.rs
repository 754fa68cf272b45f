use thiserror::Error;

/// Errors raised by the ensemble-control library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// `p_j > 0` where `q_j = 0`.
    #[error("KL divergence undefined: p[{index}] = {p} > 0 but q[{index}] = 0")]
    DivergenceUndefined { index: usize, p: f64 },

    #[error("degenerate bins: {0}")]
    DegenerateBins(String),

    #[error("oracle failed to converge: {0}")]
    OracleFailure(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
