use thiserror::Error;

/// Errors produced by the reconciliation models.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// An argument lies outside the domain where a formula is defined.
    #[error("domain error: {0}")]
    Domain(String),
    /// A model or strategy configuration is inconsistent.
    #[error("configuration error: {0}")]
    Config(String),
    /// A trace file could not be parsed.
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    /// Not enough data for the requested analysis.
    #[error("insufficient data: {0}")]
    InsufficientData(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}
