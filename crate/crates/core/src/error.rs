use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: missing required column `{column}`")]
    MissingColumn { path: String, column: String },

    #[error("row {row}: invalid value {value:?} for `{column}`: {reason}")]
    Schema {
        row: usize,
        column: String,
        value: String,
        reason: String,
    },

    #[error("duplicate subject_id {0:?}")]
    DuplicateSubject(String),

    #[error("unknown subject_id {0:?} (not present in the attribute table)")]
    UnknownSubject(String),

    #[error("cannot map education value {0:?}")]
    UnmappedEducation(String),

    #[error("cannot impute `{0}`: no observed values")]
    CannotImpute(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("`{0}` is not a protected attribute")]
    NotProtected(String),

    #[error("undefined metric: {0}")]
    Undefined(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Wav(#[from] hound::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// True for failures caused by diverging or degenerate arithmetic, as opposed
    /// to malformed inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical(_))
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::invalid(msg)
}
