use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("function is not deterministic: {first} then {second} for identical parameters")]
    NonDeterministic { first: f64, second: f64 },

    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenOutOfRange { id: usize, size: usize },

    #[error("no tokenizable characters in corpus")]
    EmptyCorpus,

    #[error("zero vector for id {0}")]
    ZeroVector(String),

    #[error("duplicate id {0}")]
    DuplicateId(String),

    #[error("embedding failed for pair {index}: {source}")]
    Embedding {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("pipeline: {0}")]
    Pipeline(String),

    #[error("degenerate statistic: {0}")]
    Degenerate(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
