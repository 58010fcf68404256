use thiserror::Error;

/// Errors raised anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("value error: {0}")]
    Value(String),
    #[error("state error: {0}")]
    State(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("generation error: {0}")]
    Generation(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("shape mismatch for tensor `{name}`: expected {expected:?}, found {found:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Config(Vec<String>),
    #[error("training diverged at phase {phase}, epoch {epoch}, batch {batch}: loss = {loss}")]
    Diverged {
        phase: usize,
        epoch: usize,
        batch: usize,
        loss: f64,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Whether the error stems from bad user input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Usage(_) | Error::Value(_) | Error::Json(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
