//! Error types shared across the crate.

use std::fmt;
use std::io;

pub type Result<T> = std::result::Result<T, Error>;

/// Unified error type for model construction, data loading, estimation and
/// pipeline verification.
#[derive(Debug)]
pub enum Error {
    /// Invalid model configuration (dimension mismatch, zero sizes).
    Config(String),
    /// Bad input data: out-of-range token ids, empty files, bad parameters.
    Input(String),
    /// Invalid cut plan: out-of-range indices, overlapping groups, shape
    /// mismatch between plan and transforms.
    Plan(String),
    /// Degenerate numerical input (zero-norm rows or columns, zero matrix).
    Degenerate(String),
    /// Normal-equations matrix is numerically rank deficient.
    RankDeficient {
        condition: f64,
    },
    /// Gradient descent produced a non-finite objective.
    Divergence {
        step: usize,
    },
    /// Fused model diverged from the explicit-transform reference.
    Integrity {
        max_abs_diff: f64,
        tolerance: f64,
    },
    /// Malformed artifact file (bad magic, truncated payload, unknown enum tag).
    Format(String),
    Io(io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
            Error::Input(msg) => write!(f, "input error: {msg}"),
            Error::Plan(msg) => write!(f, "cut plan error: {msg}"),
            Error::Degenerate(msg) => write!(f, "degenerate problem: {msg}"),
            Error::RankDeficient { condition } => write!(
                f,
                "normal equations are rank deficient (condition estimate {condition:.3e} > 1e12); \
                 use the ridge solver with alpha > 0"
            ),
            Error::Divergence { step } => {
                write!(f, "objective became non-finite at optimizer step {step}")
            }
            Error::Integrity {
                max_abs_diff,
                tolerance,
            } => write!(
                f,
                "fused model differs from explicit-transform reference: \
                 max abs logit diff {max_abs_diff:.3e} exceeds {tolerance:.3e}"
            ),
            Error::Format(msg) => write!(f, "file format error: {msg}"),
            Error::Io(err) => write!(f, "io error: {err}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(err) => Some(err),
            _ => None,
        }
    }
}

impl From<io::Error> for Error {
    fn from(err: io::Error) -> Self {
        Error::Io(err)
    }
}

impl Error {
    /// True for errors that indicate bad user input rather than an internal
    /// integrity failure. CLI maps these to exit code 2, the rest to 3.
    pub fn is_input_class(&self) -> bool {
        !matches!(self, Error::Integrity { .. } | Error::Divergence { .. })
    }
}
