use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("unknown {kind} id {id}")]
    InvalidId { kind: &'static str, id: u64 },

    #[error("invalid taxonomy: {0}")]
    Taxonomy(String),

    #[error("invalid split: {0}")]
    Split(String),

    #[error("requested {requested} held-out {what} but only {available} exist")]
    Range {
        what: &'static str,
        requested: usize,
        available: usize,
    },

    #[error("label consistency: {0}")]
    Consistency(String),

    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("undefined: {0}")]
    Undefined(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than the environment.
    /// A path that does not exist counts as bad input.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Io { source, .. } => source.kind() == std::io::ErrorKind::NotFound,
            _ => true,
        }
    }
}
