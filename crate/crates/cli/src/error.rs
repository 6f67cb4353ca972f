use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Schema(String),

    #[error("numerical failure: {0}")]
    Numerical(odekernel::Error),

    #[error("optimizer did not converge: iteration budget exhausted or no further descent (outputs were written)")]
    NotConverged,
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub fn schema(message: impl Into<String>) -> Self {
        Self::Schema(message.into())
    }

    /// Process exit code.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Io { .. } => 1,
            Self::Schema(_) => 2,
            Self::Numerical(_) => 3,
            Self::NotConverged => 4,
        }
    }
}

/// Invalid inputs reported by the library count as schema errors; the rest
/// are numerical.
impl From<odekernel::Error> for CliError {
    fn from(e: odekernel::Error) -> Self {
        use odekernel::Error as E;
        match e {
            E::InvalidGrid(_)
            | E::InvalidParameter(_)
            | E::Dimension(_)
            | E::OutOfSpan { .. }
            | E::NoVectorField(_) => Self::Schema(e.to_string()),
            other => Self::Numerical(other),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
