use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed file header or payload encoding.
    #[error("format error: {0}")]
    Format(String),

    /// Payload shorter or longer than the header promises.
    #[error("length error: expected {expected} payload bytes, found {found}")]
    Length { expected: usize, found: usize },

    /// Precondition on values violated (empty mask, bad ordering, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Tensor or grid shapes disagree.
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("config error in `{field}`: {rule}")]
    Config { field: String, rule: String },

    /// Loss or gradient became NaN/inf.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn config(field: impl Into<String>, rule: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            rule: rule.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } => 2,
            Error::Numeric(_) => 4,
            _ => 3,
        }
    }
}
