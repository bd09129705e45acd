//! Error type shared across the crate.

use std::fmt;
use std::io;

/// Errors produced by transformation, warping, attack, and evaluation code.
#[derive(Debug)]
pub enum Error {
    /// A projective warp sent a pixel to the plane at infinity.
    HorizonPoint { x: f64, y: f64 },
    /// The principal matrix logarithm does not exist, or lies outside the
    /// generator span of the requested group.
    LogUndefined(String),
    /// The tangent basis of the manifold is numerically rank deficient.
    DegenerateTangent(String),
    /// Mismatched vector or image dimensions.
    DimensionMismatch(String),
    /// An operation that needs at least one sample received none.
    EmptyDataset,
    /// A score normalization was requested for an all-zero image.
    ZeroImage,
    /// The random-transform search could not reach the requested score.
    BracketFailure(String),
    /// A geodesic path needed more segments than the configured cap.
    SegmentOverflow { segments: usize, max: usize },
    /// Every attack in an evaluation batch failed.
    AllFailed,
    /// Malformed file contents.
    Format(String),
    /// A parameter violated its documented bounds.
    InvalidParams(String),
    Io(io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::HorizonPoint { x, y } => {
                write!(f, "pixel ({x}, {y}) maps to the plane at infinity")
            }
            Error::LogUndefined(msg) => write!(f, "matrix logarithm undefined: {msg}"),
            Error::DegenerateTangent(msg) => write!(f, "degenerate tangent basis: {msg}"),
            Error::DimensionMismatch(msg) => write!(f, "dimension mismatch: {msg}"),
            Error::EmptyDataset => write!(f, "empty dataset"),
            Error::ZeroImage => write!(f, "cannot normalize by an all-zero image"),
            Error::BracketFailure(msg) => write!(f, "score bracketing failed: {msg}"),
            Error::SegmentOverflow { segments, max } => {
                write!(f, "geodesic path needs {segments} segments, cap is {max}")
            }
            Error::AllFailed => write!(f, "no image in the batch could be fooled"),
            Error::Format(msg) => write!(f, "format error: {msg}"),
            Error::InvalidParams(msg) => write!(f, "invalid parameters: {msg}"),
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

pub type Result<T> = std::result::Result<T, Error>;
