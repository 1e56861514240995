//! Error type shared by every module.

use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

/// Error classes. The CLI maps each variant to a distinct exit code, so new
/// failure modes should reuse an existing class or add a new variant, never
/// overload `Domain`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Error {
    /// Shape or length mismatch between operands.
    Dimension(String),
    /// Input outside an operation's mathematical domain (empty stream,
    /// zero-norm reference, too few points, ...).
    Domain(String),
    /// Invalid or infeasible configuration (bad ratio, unreachable cluster
    /// target, inconsistent synthesis parameters).
    Config(String),
    /// Underlying I/O failure.
    Io(String),
    /// On-disk artifact declares an unsupported format version.
    FormatVersion(String),
    /// On-disk artifact is shorter than its header claims.
    FormatTruncated(String),
    /// On-disk artifact is internally inconsistent (header vs payload vs
    /// manifest).
    FormatInconsistent(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension(m) => write!(f, "dimension error: {m}"),
            Error::Domain(m) => write!(f, "domain error: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Io(m) => write!(f, "io error: {m}"),
            Error::FormatVersion(m) => write!(f, "format version error: {m}"),
            Error::FormatTruncated(m) => write!(f, "truncated file: {m}"),
            Error::FormatInconsistent(m) => write!(f, "inconsistent file: {m}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::FormatInconsistent(e.to_string())
    }
}
