//! Crate-wide error type.

use std::fmt;

/// Errors surfaced by the library and CLI.
///
/// Variants are grouped so the CLI can map them onto exit codes:
/// usage problems, data problems, and numerical failures.
#[derive(Debug)]
pub enum Error {
    /// Bad arguments, malformed config, out-of-range options.
    Usage(String),
    /// Malformed or inconsistent input data. Carries an optional
    /// 1-based line number when the problem is tied to a file row.
    Parse { line: usize, msg: String },
    /// Dataset-level problems (empty data, zero variance, bad indices).
    Data(String),
    /// Numerical failure (indefinite matrix, divergence, non-finite values).
    Numerical(String),
    /// I/O failure with the path that caused it.
    Io { path: String, source: std::io::Error },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Usage(msg) => write!(f, "usage error: {msg}"),
            Error::Parse { line, msg } => write!(f, "parse error at line {line}: {msg}"),
            Error::Data(msg) => write!(f, "data error: {msg}"),
            Error::Numerical(msg) => write!(f, "numerical error: {msg}"),
            Error::Io { path, source } => write!(f, "io error on {path}: {source}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 1 usage, 2 data, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 1,
            Error::Parse { .. } | Error::Data(_) | Error::Io { .. } => 2,
            Error::Numerical(_) => 3,
        }
    }
}
