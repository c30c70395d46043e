use std::path::PathBuf;
use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Error, Debug)]
pub enum Error {
    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("degenerate time range: {0}")]
    DegenerateRange(String),

    #[error("unknown node label `{0}`")]
    UnknownLabel(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("model file error: {0}")]
    ModelFile(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable process exit code per error class, used by the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Parse { .. } => 2,
            Error::Io { .. } | Error::EmptyInput(_) => 3,
            Error::Shape(_) | Error::UnknownLabel(_) | Error::DegenerateRange(_) => 4,
            Error::NonFinite(_) | Error::Diverged(_) | Error::UndefinedMetric(_) => 5,
            Error::ModelFile(_) => 6,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
