use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("target-domain leakage: {0}")]
    Leakage(String),

    #[error("non-finite loss at epoch {epoch}, step {step}: {component}")]
    NonFinite {
        epoch: usize,
        step: usize,
        component: &'static str,
    },

    #[error("malformed container: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("image encoding: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(expected: impl std::fmt::Debug, got: impl std::fmt::Debug) -> Error {
    Error::Shape {
        expected: format!("{expected:?}"),
        got: format!("{got:?}"),
    }
}
