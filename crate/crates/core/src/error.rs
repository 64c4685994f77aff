use thiserror::Error;

/// Errors produced by the numerical core.
#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown loss `{name}`; valid losses are: {valid}")]
    UnknownLoss { name: String, valid: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite logits in context {context}")]
    NonFinite { context: usize },

    #[error("undefined result: {0}")]
    Undefined(String),

    #[error("not applicable: {0}")]
    NotApplicable(String),

    #[error("objective is unbounded below: {0}")]
    Unbounded(String),

    #[error("solver did not converge after {iterations} iterations (gradient norm {grad_norm:e})")]
    NotConverged { iterations: usize, grad_norm: f64 },

    #[error("cannot render an empty trace")]
    EmptyTrace,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
