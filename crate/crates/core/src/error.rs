use thiserror::Error;

use crate::gateway::GatewayError;
use crate::outcome::InvalidOutcome;
use crate::schema::SchemaError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Outcome(#[from] InvalidOutcome),
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error("{0}")]
    Validation(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

impl Error {
    /// Input was readable but wrong, as opposed to I/O or network trouble.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Outcome(_) | Error::Schema(_) | Error::Validation(_)
        )
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
