use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("backbone is frozen: {0}")]
    Frozen(&'static str),
    #[error("prompt for task type {0} is frozen")]
    PromptFrozen(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite loss at {context}: {value}")]
    NonFinite { context: String, value: f64 },
    #[error("generation token for domain {0:?} is already registered")]
    DuplicateDomain(String),
    #[error("no generation token registered for domain {0:?}")]
    UnknownDomain(String),
    #[error("unknown class id {0} for verbalizer")]
    UnknownClass(usize),
    #[error("checksum mismatch: file says {expected}, parameters hash to {actual}")]
    Checksum { expected: String, actual: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("insufficient data: {0}")]
    Insufficient(String),
    #[error("malformed data: {0}")]
    Format(String),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
