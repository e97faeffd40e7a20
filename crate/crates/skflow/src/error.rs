use thiserror::Error;

#[derive(Debug, Error)]
pub enum SkError {
    #[error("shape mismatch: {left:?} vs {right:?} in {context}")]
    ShapeMismatch {
        left: (usize, usize, usize, usize),
        right: (usize, usize, usize, usize),
        context: String,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid operation: {0}")]
    Invalid(String),
    #[error("flow file format error: {0}")]
    Format(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, SkError>;

impl SkError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        SkError::Io { path: path.into(), source }
    }
}
