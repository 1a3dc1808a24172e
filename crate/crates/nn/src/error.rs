use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch at {layer}: {message}")]
    Shape { layer: String, message: String },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Core(#[from] dwt_core::Error),
}

pub type Result<T> = std::result::Result<T, NnError>;

pub(crate) fn shape_err(layer: &str, message: impl Into<String>) -> NnError {
    NnError::Shape {
        layer: layer.to_string(),
        message: message.into(),
    }
}
