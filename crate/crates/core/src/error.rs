use thiserror::Error;

/// Error type shared across the whole pipeline.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("generation error: {0}")]
    Generation(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;

impl CoreError {
    /// Stable category code used as the process exit code by the CLI.
    pub fn category_code(&self) -> i32 {
        match self {
            CoreError::Dimension(_) => 2,
            CoreError::Config(_) => 3,
            CoreError::Contract(_) => 4,
            CoreError::Generation(_) => 5,
            CoreError::Parse { .. } => 6,
            CoreError::Io(_) => 7,
        }
    }
}
