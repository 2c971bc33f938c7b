//! Error type shared by every stage of the engine.

use alloc::string::String;
use core::fmt;

/// Convenience alias used throughout the crate.
pub type Result<T> = core::result::Result<T, Error>;

/// Failure modes surfaced by the engine.
///
/// Variants carry human-readable context (symbol, line, layer, parameter
/// name) because callers are expected to report them verbatim.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Malformed input text. `line` is 1-based and includes the header.
    Parse { line: usize, msg: String },
    /// Structurally invalid data: bad ordering, non-positive prices,
    /// mismatched calendars, signals of the wrong length, and similar.
    Validation(String),
    /// A computation needs more records than were supplied.
    InsufficientData { needed: usize, got: usize },
    /// A parameter lies outside its documented range.
    Parameter(String),
    /// Tensor or layer shapes do not line up; names the offending layer.
    Shape(String),
    /// A numeric procedure failed: non-convergence, zero denominator,
    /// vanishing probability, singular system.
    Numeric(String),
    /// A metric has no defined value on the given curve.
    UndefinedMetric(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Parse { line, msg } => write!(f, "parse error at line {line}: {msg}"),
            Error::Validation(msg) => write!(f, "invalid data: {msg}"),
            Error::InsufficientData { needed, got } => {
                write!(f, "insufficient data: need {needed} records, got {got}")
            }
            Error::Parameter(msg) => write!(f, "parameter out of range: {msg}"),
            Error::Shape(msg) => write!(f, "shape mismatch: {msg}"),
            Error::Numeric(msg) => write!(f, "numeric failure: {msg}"),
            Error::UndefinedMetric(msg) => write!(f, "metric undefined: {msg}"),
        }
    }
}

impl core::error::Error for Error {}
