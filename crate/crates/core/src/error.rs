use std::path::PathBuf;

/// Broad failure category, used by the command line to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorKind {
    Config,
    Artifact,
    Numerical,
    Invalid,
    Io,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad VOLG file: {0}")]
    Format(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("upstream artifact error: {0}")]
    Artifact(String),
    #[error("numerical failure in {stage}: {detail}")]
    Numerical { stage: String, detail: String },
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Io { .. } => ErrorKind::Io,
            Error::Format(_) | Error::Artifact(_) => ErrorKind::Artifact,
            Error::Shape(_) | Error::Invalid(_) => ErrorKind::Invalid,
            Error::Config(_) => ErrorKind::Config,
            Error::Numerical { .. } => ErrorKind::Numerical,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn numerical(stage: &str, detail: impl Into<String>) -> Self {
        Error::Numerical { stage: stage.to_string(), detail: detail.into() }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
