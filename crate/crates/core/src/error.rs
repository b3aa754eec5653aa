use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid equirectangular dims {width}x{height} (width must be 2 x height)")]
    InvalidDims { width: usize, height: usize },

    #[error("direction is not unit length (norm {0})")]
    NonUnitDirection(f64),

    #[error("matrix is not a proper rotation")]
    NotARotation,

    #[error("dimension mismatch: {a_width}x{a_height} vs {b_width}x{b_height}")]
    DimensionMismatch {
        a_width: usize,
        a_height: usize,
        b_width: usize,
        b_height: usize,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("insufficient features: {found} matches, need at least {needed}")]
    InsufficientFeatures { found: usize, needed: usize },

    #[error("insufficient near-horizon matches for misalignment fit: {found}")]
    InsufficientHorizonMatches { found: usize },

    #[error("indeterminate direction: {0}")]
    IndeterminateDirection(String),

    #[error("malformed {format} data: {reason}")]
    Format { format: &'static str, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn format(format: &'static str, reason: impl Into<String>) -> Self {
        Error::Format {
            format,
            reason: reason.into(),
        }
    }

    pub(crate) fn mismatch(a: (usize, usize), b: (usize, usize)) -> Self {
        Error::DimensionMismatch {
            a_width: a.0,
            a_height: a.1,
            b_width: b.0,
            b_height: b.1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
