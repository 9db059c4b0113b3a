use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("step out of range: {0}")]
    Range(String),
    #[error("non-finite value at step {step}: {context}")]
    Numeric { step: u64, context: String },
    #[error("paired runs mismatch: {0}")]
    Pairing(String),
    #[error("score matrix error: {0}")]
    Score(String),
    #[error(transparent)]
    NumKit(#[from] numkit::NumKitError),
}
