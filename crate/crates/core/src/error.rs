use thiserror::Error;

/// Errors raised by the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// The zero vector is outside the convex hull of the moment rows. `direction`
    /// is a multiplier direction along which every moment row is positive.
    #[error("empirical likelihood constraints infeasible ({reason})")]
    Infeasible { reason: String, direction: Vec<f64> },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("estimation failed: {0}")]
    Estimation(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
