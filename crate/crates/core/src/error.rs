use thiserror::Error;

/// Errors shared by every module in this crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or channel counts do not line up.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A geometric argument lies outside the valid domain (e.g. a box
    /// entirely off the image).
    #[error("domain error: {0}")]
    Domain(String),

    /// A scalar parameter is outside its allowed range.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// An operation was called in the wrong order (e.g. backward before
    /// forward).
    #[error("state error: {0}")]
    State(String),

    /// A run configuration is unusable (empty split, missing field, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed binary or text artifact.
    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;
