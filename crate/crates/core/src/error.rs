//! Error type shared across the engine.

/// Engine-wide error. Variants map onto the failure classes the public
/// operations document: shape mismatches, bad parameters, policy violations
/// (asking for data a mode never cached), and internal consistency checks.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("policy violation: {0}")]
    Policy(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("calibration failed: {0}")]
    Calibration(String),
    #[error("internal consistency error: {0}")]
    Internal(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
