use alloc::string::String;
use core::fmt;

pub type Result<T> = core::result::Result<T, Error>;

/// Errors raised by the numeric core. All of them describe rejected input;
/// nothing here is recoverable by retrying.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Two shapes that must agree do not.
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    /// A NaN or infinity where a finite value is required.
    NonFinite { what: &'static str },
    /// A scalar parameter outside its admissible range.
    OutOfRange { what: &'static str, value: f64 },
    /// A selection whose probability mass is zero cannot be renormalized.
    ZeroMass,
    /// A vector whose direction is needed has zero norm.
    ZeroNorm { what: &'static str },
    /// Any other structural violation.
    Invalid(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::DimensionMismatch {
                what,
                expected,
                found,
            } => write!(f, "{what}: expected dimension {expected}, found {found}"),
            Error::NonFinite { what } => write!(f, "{what}: non-finite value"),
            Error::OutOfRange { what, value } => write!(f, "{what}: value {value} out of range"),
            Error::ZeroMass => f.write_str("selected experts carry zero probability mass"),
            Error::ZeroNorm { what } => write!(f, "{what}: zero-norm vector"),
            Error::Invalid(msg) => f.write_str(msg),
        }
    }
}

impl core::error::Error for Error {}
