//! Error categories shared across the workspace. The CLI maps these onto
//! its exit codes (config -> 3, data/integrity -> 4, numeric/domain -> 5).

use std::fmt;

#[derive(Debug, Clone)]
pub enum Error {
    /// Tensor or array dimensions do not satisfy an operation's contract.
    Shape(String),
    /// An index or step fell outside its valid range.
    Range(String),
    /// A scalar argument violated a mathematical precondition.
    Domain(String),
    /// Configuration is inconsistent, unknown, or mismatched.
    Config(String),
    /// Dataset content is missing or malformed.
    Data(String),
    /// A persisted artifact is corrupt or truncated.
    Integrity(String),
    /// A computation produced NaN/Inf or failed to converge.
    Numeric(String),
    /// Underlying IO failure.
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn range(msg: impl Into<String>) -> Self {
        Error::Range(msg.into())
    }
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
    pub fn integrity(msg: impl Into<String>) -> Self {
        Error::Integrity(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    /// Short tag used in CLI error messages.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Range(_) => "range",
            Error::Domain(_) => "domain",
            Error::Config(_) => "config",
            Error::Data(_) => "data",
            Error::Integrity(_) => "integrity",
            Error::Numeric(_) => "numeric",
            Error::Io(_) => "io",
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let msg = match self {
            Error::Shape(m)
            | Error::Range(m)
            | Error::Domain(m)
            | Error::Config(m)
            | Error::Data(m)
            | Error::Integrity(m)
            | Error::Numeric(m)
            | Error::Io(m) => m,
        };
        write!(f, "{} error: {}", self.category(), msg)
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
