//! Error type shared across the crate.

/// Crate-wide error enum. Variants map to the failure classes callers are
/// expected to handle differently: bad shapes, bad configuration, numeric
/// breakdown, broken API contracts, analysis failures, and I/O.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shapes do not line up for the requested operation.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A configuration value is out of range or inconsistent.
    #[error("invalid config: {0}")]
    Config(String),

    /// A computation produced NaN/Inf or hit a numerically invalid state.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// An API precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A complexity or evaluation analysis could not be completed.
    #[error("analysis failure: {0}")]
    Analysis(String),

    /// A file or directory could not be loaded or parsed.
    #[error("load failure: {0}")]
    Load(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
