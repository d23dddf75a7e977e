//! Error type shared across the workbench.

use std::fmt;

/// Library-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Failure modes surfaced by the workbench.
#[derive(Debug)]
pub enum Error {
    /// Tensor/matrix shape disagreement. Carries the operation name and both shapes.
    Dimension {
        op: &'static str,
        detail: String,
    },
    /// Invalid configuration (bad hyperparameters, infeasible window lengths, ...).
    Config(String),
    /// A caller violated an API contract (empty input where non-empty is required, ...).
    Contract(String),
    /// Non-finite values or other numeric breakdowns.
    Numeric(String),
    /// Input file could not be parsed. `row` is 1-based and counts data rows.
    Parse {
        path: String,
        row: Option<usize>,
        detail: String,
    },
    /// Checkpoint / index / report serialization problems.
    Format(String),
    Io(std::io::Error),
}

impl Error {
    pub fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension { op, detail } => write!(f, "dimension error in {op}: {detail}"),
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
            Error::Contract(msg) => write!(f, "contract violation: {msg}"),
            Error::Numeric(msg) => write!(f, "numeric error: {msg}"),
            Error::Parse { path, row, detail } => match row {
                Some(r) => write!(f, "parse error in {path} at data row {r}: {detail}"),
                None => write!(f, "parse error in {path}: {detail}"),
            },
            Error::Format(msg) => write!(f, "format error: {msg}"),
            Error::Io(e) => write!(f, "i/o error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}
