use thiserror::Error;

/// Errors produced by the analysis, synthesis and simulation routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("{0}")]
    Unstable(String),

    #[error("system is not strongly input observable: rank {rank} < {required}")]
    NotStronglyInputObservable { rank: usize, required: usize },

    #[error("estimate not unique: {0}")]
    Singular(String),

    #[error("infeasible: {reason}")]
    Infeasible {
        reason: String,
        /// Best lower bound found on the smallest feasible parameter, if any.
        lower_bound: Option<f64>,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code used by the command line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Dimension(_)
            | Error::InvalidArgument(_)
            | Error::NotPositiveDefinite(_)
            | Error::Parse(_)
            | Error::Io { .. } => 2,
            Error::Infeasible { .. } => 3,
            Error::Unstable(_)
            | Error::NotStronglyInputObservable { .. }
            | Error::Singular(_)
            | Error::Numerical(_) => 4,
        }
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
