use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{0}")]
    Config(String),

    #[error("{0}")]
    Schema(String),

    #[error("{msg}, line {line}")]
    Parse { line: usize, msg: String },

    #[error("{0}")]
    Stratification(String),

    #[error("empty split")]
    EmptySplit,

    #[error("{0}")]
    Shape(String),

    #[error("{0}")]
    Lookup(String),

    #[error("{0}")]
    Tape(String),

    #[error("{0}")]
    Domain(String),

    #[error("{0}")]
    Numerical(String),

    #[error("AUC undefined: {0}")]
    AucUndefined(String),

    #[error("{0}")]
    Timing(String),

    #[error("{}: {msg}", path.display())]
    Artifact { path: PathBuf, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable reason tag.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Schema(_) => "schema",
            Error::Parse { .. } => "parse",
            Error::Stratification(_) => "stratification",
            Error::EmptySplit => "empty-split",
            Error::Shape(_) => "shape",
            Error::Lookup(_) => "lookup",
            Error::Tape(_) => "tape",
            Error::Domain(_) => "domain",
            Error::Numerical(_) => "numerical",
            Error::AucUndefined(_) => "auc",
            Error::Timing(_) => "timing",
            Error::Artifact { .. } => "artifact",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    /// Process exit code: 1 config, 2 artifact, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Artifact { .. } | Error::Io(_) | Error::Json(_) => 2,
            Error::Numerical(_) => 3,
            _ => 1,
        }
    }

    pub fn artifact(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Artifact {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
