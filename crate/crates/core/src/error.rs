use alloc::string::String;
use core::fmt;

/// Errors raised by the engine.
///
/// Contract violations are caller bugs (mismatched shapes, misaligned masks,
/// out-of-range probabilities). Malformed input comes from data the caller
/// did not construct itself, such as edge lists read from disk.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Input data failed validation.
    MalformedInput(String),
    /// A documented precondition of an operation was violated.
    Contract(String),
    /// Shapes of two operands disagree.
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    /// A loss or gradient estimate came out NaN or infinite.
    NonFinite(&'static str),
    /// Training produced non-finite losses for too many consecutive epochs.
    Diverged { epoch: usize },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::MalformedInput(msg) => write!(f, "malformed input: {msg}"),
            Error::Contract(msg) => write!(f, "contract violation: {msg}"),
            Error::ShapeMismatch { op, left, right } => write!(
                f,
                "shape mismatch in {op}: {}x{} vs {}x{}",
                left.0, left.1, right.0, right.1
            ),
            Error::NonFinite(what) => write!(f, "non-finite value in {what}"),
            Error::Diverged { epoch } => {
                write!(f, "training diverged: non-finite loss up to epoch {epoch}")
            }
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! contract {
    ($($arg:tt)*) => {
        $crate::error::Error::Contract(alloc::format!($($arg)*))
    };
}
pub(crate) use contract;
