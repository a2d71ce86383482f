use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("depth must be positive and finite, got {0}")]
    NonPositiveDepth(f64),

    #[error("normal is not unit length (|n| = {0})")]
    NonUnitNormal(f64),

    /// The destination ray is (nearly) contained in the source tangent plane,
    /// or the propagated depth is not a positive finite number.
    #[error("degenerate depth propagation")]
    DegeneratePropagation,

    #[error("ray does not intersect the plane")]
    NoIntersection,

    #[error("plane intersection lies behind the camera (depth {0})")]
    BehindCamera(f64),

    #[error("dimension mismatch: expected {expected:?}, found {found:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("pixel ({u}, {v}) is not covered by any primitive")]
    Coverage { u: usize, v: usize },

    #[error("weights at pixel {pixel} are not a distribution (sum {sum}, min {min})")]
    InvalidWeights { pixel: usize, sum: f64, min: f64 },

    #[error("anchor {index} at ({u}, {v}) is invalid: {reason}")]
    InvalidAnchor {
        index: usize,
        u: i64,
        v: i64,
        reason: String,
    },

    #[error("mask selects no pixels")]
    EmptyMask,

    #[error("window {window} is invalid for a {width}x{height} image")]
    InvalidWindow {
        window: usize,
        width: usize,
        height: usize,
    },

    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Divergence { epoch: usize, loss: f64 },

    #[error("malformed PFM: {0}")]
    Pfm(String),

    #[error("malformed PGM: {0}")]
    Pgm(String),

    #[error("csv row {row}: {message}")]
    CsvRow { row: usize, message: String },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
