use thiserror::Error;

/// Errors raised by the link, response, simulation and analysis routines.
#[derive(Debug, Error)]
pub enum Error {
    /// A numeric argument lies outside the domain of the quantity.
    #[error("domain error: {0}")]
    Domain(String),
    /// Arguments are individually valid but inconsistent with each other.
    #[error("usage error: {0}")]
    Usage(String),
    /// Input data (tag files, CSV tables) could not be interpreted.
    #[error("data error: {0}")]
    Data(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
