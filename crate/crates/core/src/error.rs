use thiserror::Error;

/// Error type shared by every subsystem in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("point on or behind the source plane (denominator {0:.3e} mm)")]
    BehindSource(f64),
    #[error("singular covariance matrix (det = {0:.3e})")]
    SingularCovariance(f64),
    #[error("zero-norm quaternion")]
    ZeroNormQuaternion,
    #[error("query point is not visible in any view")]
    AllViewsInvalid,
    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),
    #[error("numeric divergence: {0}")]
    Divergence(String),
    #[error("bad magic: expected `{expected}`, found `{found}`")]
    BadMagic { expected: String, found: String },
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("malformed file: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
