use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("bad dimension: {0}")]
    Dimension(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("vocab error: token id {id} out of range (vocab {vocab})")]
    Vocab { id: usize, vocab: usize },

    #[error("unknown character {0:?}")]
    Charset(char),

    #[error("unknown edit op {0:?}")]
    EditOp(String),

    #[error("group size must be >= 2, got {0}")]
    GroupSize(usize),

    #[error("degenerate transition density: sigma must be > 0")]
    DegenerateDensity,

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::Shape {
            expected: expected.into(),
            got: got.into(),
        }
    }
}
