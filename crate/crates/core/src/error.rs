use thiserror::Error;

/// Error type shared by every module in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("missing upstream artifact for stage `{stage}`: {path}")]
    Dependency { stage: String, path: String },
    #[error("fit failed: {0}")]
    Fit(String),
    #[error("undefined quantity: {0}")]
    Undefined(String),
    #[error("inconsistent inputs: {0}")]
    Inconsistent(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
