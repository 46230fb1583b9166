use thiserror::Error;

/// Errors raised by the distillation library.
#[derive(Debug, Error)]
pub enum Error {
    /// An input lies outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Shapes or arguments that do not fit together.
    #[error("usage error: {0}")]
    Usage(String),

    /// The data matrix is rank deficient where full column rank is required.
    #[error("singular data matrix: {columns} columns but numerical rank {rank}")]
    Singular { columns: usize, rank: usize },

    /// Malformed input file.
    #[error("format error: {0}")]
    Format(String),

    /// The training loss kept increasing; a smaller step size is needed.
    #[error("training diverged at iteration {iteration} with step {step:e}; retry with a smaller step size")]
    StepSize { iteration: usize, step: f64 },

    /// A non-finite value appeared during training.
    #[error("non-finite value in {what} at iteration {iteration}")]
    Numeric { what: String, iteration: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}

pub(crate) fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Usage(msg.into()))
}
