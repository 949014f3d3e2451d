use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("non-finite value in loss component `{component}`")]
    NonFinite { component: String },

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("missing dependency `{name}`: {detail}")]
    Dependency { name: String, detail: String },

    #[error("invalid conditioning token {token}; valid tokens: {valid}")]
    InvalidToken { token: String, valid: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code class: 3 config, 4 data, 5 numeric, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidToken { .. } | Error::Dependency { .. } => 3,
            Error::Data(_) | Error::Image { .. } | Error::Checkpoint(_) => 4,
            Error::NonFinite { .. } | Error::Numeric(_) | Error::UndefinedCorrelation(_) => 5,
            Error::Shape(_) | Error::Io { .. } => 1,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
