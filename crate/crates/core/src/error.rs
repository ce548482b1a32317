use std::io;

use thiserror::Error;

/// Errors produced by the sncnet library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    BadVersion(u32),

    #[error("truncated payload: {0}")]
    Truncated(String),

    #[error("non-finite value at element {0}")]
    NonFinite(usize),

    #[error("duplicate site {0:?}")]
    DuplicateSite([u32; 4]),

    #[error("site {site:?} out of bounds for dims {dims:?}")]
    OutOfBounds { site: [u32; 4], dims: [usize; 4] },

    #[error("dense oracle refuses dims {0:?} (max 16 per axis)")]
    SizeGuard([usize; 4]),

    #[error("point maps to infinity (w = {0:e})")]
    PointAtInfinity(f64),

    #[error("homography is not invertible (det = {0:e})")]
    Singular(f64),

    #[error("empty match list")]
    EmptyMatches,

    #[error("parse error: {0}")]
    Parse(String),

    #[error("image decode: {0}")]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
