use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A level violates one of the structural invariants (named in the message).
    #[error("invalid level: {0}")]
    InvalidLevel(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("generation failure: {0}")]
    Generation(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
