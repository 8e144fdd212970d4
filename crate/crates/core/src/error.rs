use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),

    #[error("invalid layout: {0}")]
    Layout(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("underdetermined regression: {samples} samples for {basis} basis functions")]
    Underdetermined { samples: usize, basis: usize },

    #[error("DoF {dof}: {source}")]
    Dof {
        dof: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("insufficient data: need at least {needed}, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("{} nonconforming demonstration(s):{}", .0.len(), .0.iter().map(|m| format!("\n  {m}")).collect::<String>())]
    Nonconforming(Vec<String>),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("model format: {0}")]
    Format(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }

    /// Errors caused by bad input data, as opposed to bad configuration or
    /// numerical breakdown.
    pub fn is_data_error(&self) -> bool {
        match self {
            Error::Dof { source, .. } => source.is_data_error(),
            Error::InvalidTrajectory(_)
            | Error::Layout(_)
            | Error::Parse { .. }
            | Error::Io { .. }
            | Error::Underdetermined { .. }
            | Error::InsufficientData { .. }
            | Error::Dimension(_)
            | Error::Nonconforming(_)
            | Error::Format(_) => true,
            Error::Config(_) | Error::Numerical(_) => false,
        }
    }
}
