//! Crate-wide error type.

/// Errors surfaced by tensor ops, model assembly, data generation, and the
/// training harness.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Two operands had incompatible shapes for the named operation.
    #[error("shape mismatch in `{op}`: left operand has shape {left:?}, right operand has shape {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// A single operand or argument was invalid for the named operation.
    #[error("invalid argument to `{op}`: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    /// A configuration value was out of range or inconsistent.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Dataset construction or loading failed.
    #[error("data error: {0}")]
    Data(String),

    /// A runtime invariant the caller relies on was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// An op produced a NaN or infinity during the forward pass.
    #[error("non-finite value produced by op `{op}` at tape node {node}")]
    NonFinite { op: &'static str, node: usize },

    /// A checkpoint file was malformed or inconsistent with the run config.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// JSON/TOML encode or decode failure.
    #[error("serialization error: {0}")]
    Serialization(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}

impl From<toml::de::Error> for Error {
    fn from(e: toml::de::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}

impl From<toml::ser::Error> for Error {
    fn from(e: toml::ser::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
