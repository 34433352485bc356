use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated an operation's preconditions (shapes, label ranges, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite numeric input: {0}")]
    NumericInput(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },

    #[error("clustering failed{}: {msg}", .epoch.map(|e| format!(" at epoch {e}")).unwrap_or_default())]
    Clustering { epoch: Option<usize>, msg: String },

    #[error("statistics error: {0}")]
    Statistics(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit status used by the command-line tool.
    ///
    /// 1 = config/contract, 2 = I/O, 3 = numeric or clustering failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Contract(_) | Error::Config(_) | Error::Parse { .. } => 1,
            Error::Io { .. } => 2,
            Error::NumericInput(_) | Error::Clustering { .. } | Error::Statistics(_) => 3,
        }
    }
}
