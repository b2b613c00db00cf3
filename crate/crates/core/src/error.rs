use thiserror::Error;

/// Errors raised by the core library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("site count {count} exceeds the configured cap {cap}; use a smaller n")]
    SiteCap { count: usize, cap: usize },
    #[error("degree {degree} exceeds the configured cap {cap}")]
    DegreeCap { degree: usize, cap: usize },
    #[error("lattice mismatch: {0}")]
    LatticeMismatch(String),
    #[error("background mismatch: {left} vs {right}")]
    BackgroundMismatch { left: String, right: String },
    #[error("operator is singular: smallest eigenvalue {eigenvalue:e}")]
    Singular { eigenvalue: f64 },
    #[error("ill-conditioned fit (condition number {cond:e}); {hint}")]
    IllConditioned { cond: f64, hint: String },
    #[error("overlapping local factors need the E-product path: {0}")]
    NeedsExtension(String),
    #[error("needs smooth part: {0}")]
    NeedsSmoothPart(String),
    #[error("order {order} exceeds the cap {cap}")]
    OrderCap { order: usize, cap: usize },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Invalid(msg.into()))
}
