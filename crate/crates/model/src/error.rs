use std::path::PathBuf;

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Core(#[from] hoi_core::Error),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("box lies outside the image: {0}")]
    OutOfBounds(String),

    #[error("invalid prompt: {0}")]
    InvalidPrompt(String),

    #[error("invalid candidate: {0}")]
    InvalidCandidate(String),

    #[error("cosine undefined: {0}")]
    UndefinedCosine(String),

    #[error("invalid batch: {0}")]
    InvalidBatch(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("missing dependency: {0}")]
    Dependency(String),

    #[error("incompatible checkpoint: {0}")]
    Compatibility(String),

    #[error("corrupt checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {message}")]
    Image { path: PathBuf, message: String },
}

impl ModelError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ModelError::Io {
            path: path.into(),
            source,
        }
    }

    /// True when the input, not the environment, is at fault.
    pub fn is_validation(&self) -> bool {
        match self {
            ModelError::Core(e) => e.is_validation(),
            ModelError::Io { .. } | ModelError::Image { .. } | ModelError::Checkpoint { .. } => false,
            _ => true,
        }
    }
}
