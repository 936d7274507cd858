use alloc::string::String;
use core::fmt;

/// Errors surfaced by the pipeline stages.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Error {
    /// Invalid configuration or parameters (counts, ranges, shapes declared
    /// up front).
    Config(String),
    /// A referenced entity (sample, clothes ID, artifact) does not exist.
    Lookup(String),
    /// Input data violates a structural requirement.
    Data(String),
    /// A computation produced non-finite values.
    Numerical(String),
    /// An evaluation protocol requirement cannot be satisfied.
    Protocol(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
            Error::Lookup(msg) => write!(f, "lookup error: {msg}"),
            Error::Data(msg) => write!(f, "data error: {msg}"),
            Error::Numerical(msg) => write!(f, "numerical error: {msg}"),
            Error::Protocol(msg) => write!(f, "protocol error: {msg}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;
