//! Crate-wide error type.

use std::fmt;
use std::path::PathBuf;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted by the library.
#[derive(Debug)]
pub enum Error {
    /// Two operands have incompatible shapes.
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    /// A square matrix was required.
    NonSquare { op: &'static str, rows: usize, cols: usize },
    /// A constructor received dimensions or data that violate an invariant.
    InvalidDimensions { what: &'static str, detail: String },
    /// An argument was outside its allowed range.
    InvalidArgument(String),
    /// The scaling step of the matrix exponential would need more squarings
    /// than allowed; the input norm is pathologically large.
    SquaringOverflow { needed: u32, max: u32, norm: f64 },
    /// A row with zero Euclidean norm cannot be normalized under the strict policy.
    ZeroNormRow { row: usize },
    /// The node handed to the backward pass is not a scalar.
    NonScalarLoss { rows: usize, cols: usize },
    /// Training produced a non-finite loss.
    Diverged { epoch: usize, detail: String },
    /// File does not start with the expected magic bytes.
    BadMagic { found: [u8; 4] },
    /// File version is not supported by this build.
    UnsupportedVersion { found: u16, supported: u16 },
    /// File ended before the announced payload was complete.
    Truncated { context: &'static str },
    /// A field in a model file holds an invalid value.
    MalformedFile { context: String },
    /// An I/O failure, with the path that caused it.
    Io { path: PathBuf, source: std::io::Error },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, left, right } => write!(
                f,
                "{op}: incompatible shapes {}x{} and {}x{}",
                left.0, left.1, right.0, right.1
            ),
            Error::NonSquare { op, rows, cols } => {
                write!(f, "{op}: expected a square matrix, got {rows}x{cols}")
            }
            Error::InvalidDimensions { what, detail } => write!(f, "invalid {what}: {detail}"),
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::SquaringOverflow { needed, max, norm } => write!(
                f,
                "matrix exponential needs {needed} squarings (max {max}); input 1-norm {norm:.3e} \
                 signals pathologically large parameters"
            ),
            Error::ZeroNormRow { row } => {
                write!(f, "row {row} has zero norm and cannot be normalized")
            }
            Error::NonScalarLoss { rows, cols } => {
                write!(f, "backward requires a scalar loss node, got {rows}x{cols}")
            }
            Error::Diverged { epoch, detail } => {
                write!(f, "training diverged at epoch {epoch}: {detail}")
            }
            Error::BadMagic { found } => write!(
                f,
                "bad magic {:?}, expected \"ULIE\"",
                String::from_utf8_lossy(found)
            ),
            Error::UnsupportedVersion { found, supported } => {
                write!(f, "unsupported file version {found}, this build reads {supported}")
            }
            Error::Truncated { context } => write!(f, "file truncated while reading {context}"),
            Error::MalformedFile { context } => write!(f, "malformed model file: {context}"),
            Error::Io { path, source } => write!(f, "i/o error on {}: {source}", path.display()),
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
