//! Crate-wide error type and result alias.
//!
//! Every fallible operation returns [`Error`]; variants map onto the two
//! process exit classes used by the CLI (usage/configuration vs data/file).

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor or image shapes; names both offending shapes.
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Invalid configuration value or inconsistent layer arithmetic.
    #[error("configuration error: {0}")]
    Config(String),

    /// API misuse: a precondition the caller controls was violated.
    #[error("usage error: {0}")]
    Usage(String),

    /// Coordinates or indices outside the valid range.
    #[error("bounds error in {op}: {detail}")]
    Bounds { op: &'static str, detail: String },

    /// Malformed file content; `offset` is the byte position of the problem.
    #[error("format error at byte {offset}: {what}")]
    Format { offset: usize, what: String },

    /// I/O failure, tagged with the path involved.
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Synthetic data generation could not satisfy its constraints.
    #[error("generation error: {0}")]
    Generation(String),

    /// Input is degenerate for the requested statistic (e.g. one-class AUC).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
}

impl Error {
    /// Exit status class for the CLI: 1 = usage/configuration, 2 = data/file.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Dimension { .. } | Error::Config(_) | Error::Usage(_) => 1,
            Error::Bounds { .. }
            | Error::Format { .. }
            | Error::Io { .. }
            | Error::Generation(_)
            | Error::DegenerateInput(_) => 2,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
