use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumKitError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("input contains non-finite entries: {0}")]
    NonFinite(String),
    #[error("matrix too large for exact decomposition: min(rows, cols) = {0}, limit {1}")]
    TooLarge(usize, usize),
    #[error("invalid argument: {0}")]
    InvalidArg(String),
}
