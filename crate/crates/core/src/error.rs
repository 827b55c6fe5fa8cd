use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Inconsistent dimensions or an invalid model/run configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// A configuration key carried an unusable value.
    #[error("invalid value for `{key}`: {message}")]
    ConfigKey { key: String, message: String },

    /// A single input row could not be used.
    #[error("data error at line {line}, column `{column}`: {message}")]
    DataRow {
        line: usize,
        column: String,
        message: String,
    },

    #[error("data error: {0}")]
    Data(String),

    /// Every kernel weight at the query point is zero (or the weights carry no positive mass).
    #[error("empty kernel neighborhood at query point")]
    EmptyNeighborhood,

    #[error("degenerate conditional expectation: {0}")]
    DegenerateConditional(String),

    #[error("moment provider has not been fitted")]
    NotFitted,

    #[error("no convergence after {iterations} iterations (residual {residual:e}, last iterate {last:?})")]
    NoConvergence {
        last: Vec<f64>,
        iterations: usize,
        residual: f64,
    },

    #[error("singular Jacobian")]
    SingularJacobian,

    #[error("bootstrap unstable: {failures} of {total} resamples failed")]
    BootstrapUnstable { failures: usize, total: usize },

    #[error("oracle estimator needs latent outcomes, which this sample does not carry")]
    OracleUnavailable,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn key(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::ConfigKey {
            key: key.into(),
            message: message.into(),
        }
    }

    /// Process exit code used by the command-line front end.
    ///
    /// 2 configuration, 3 data, 4 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::ConfigKey { .. } => 2,
            Error::DataRow { .. }
            | Error::Data(_)
            | Error::OracleUnavailable
            | Error::Io(_)
            | Error::Csv(_) => 3,
            Error::EmptyNeighborhood
            | Error::DegenerateConditional(_)
            | Error::NotFitted
            | Error::NoConvergence { .. }
            | Error::SingularJacobian
            | Error::BootstrapUnstable { .. } => 4,
        }
    }
}
