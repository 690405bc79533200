use thiserror::Error;

/// Errors produced anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or layer shapes do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A grid specification violates the overlap constraint or a
    /// divisibility requirement.
    #[error("invalid region geometry: {0}")]
    Geometry(String),

    /// A configuration value is out of its allowed range.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A value that must stay finite became NaN or infinite.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Checkpoint file is malformed or inconsistent.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Dataset manifest or image file problem.
    #[error("dataset error: {0}")]
    Data(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
