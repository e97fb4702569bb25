use thiserror::Error;

/// Errors raised anywhere in the model stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("lookup error: id {id} out of range for table of size {size}")]
    Lookup { id: usize, size: usize },
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("tokenization error: {0}")]
    Tokenize(String),
    #[error("generation error: {0}")]
    Generation(String),
    #[error("training diverged at step {step}: loss={loss} lr={lr:.3e} grad_norm={grad_norm:.3e}")]
    Diverged {
        step: usize,
        loss: f64,
        lr: f64,
        grad_norm: f64,
    },
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}

pub(crate) fn config(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
