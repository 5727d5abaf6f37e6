use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("finite-difference oracle produced a non-finite value at ({row}, {col})")]
    OracleFailure { row: usize, col: usize },

    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("average precision is undefined: {0}")]
    UndefinedAp(String),

    #[error("architecture mismatch: expected {expected}, found {found}")]
    ArchitectureMismatch { expected: String, found: String },

    #[error("parse error in field `{field}`: {message}")]
    Parse { field: String, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("refusing to write into non-empty directory {0} (use --force)")]
    NonEmptyOutput(PathBuf),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            field: field.into(),
            message: message.into(),
        }
    }
}
