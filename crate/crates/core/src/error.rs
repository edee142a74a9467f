use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not conform for the requested operation.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A scalar or structural parameter is out of its valid range.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// A configuration is internally inconsistent (dims, toggles, keys).
    #[error("configuration error: {0}")]
    Config(String),

    /// Graph construction received inconsistent node data.
    #[error("graph construction error: {0}")]
    Construction(String),

    /// Invalid input to a pipeline stage (empty proposals, bad image size).
    #[error("input error: {0}")]
    Input(String),

    /// A recorded computation produced a non-finite value.
    #[error("evaluation error: {0}")]
    Evaluation(String),

    /// Backward was called twice on the same recording, or on an empty one.
    #[error("differentiation context error: {0}")]
    Tape(String),

    /// Training diverged (non-finite loss).
    #[error("training diverged: {0}")]
    Diverged(String),

    /// Checkpoint file is malformed or inconsistent with the model.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
