use std::path::PathBuf;

/// Errors produced by the laboratory.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("classifier gate unmet: head `{head}` reached {accuracy:.4} < {required:.2}")]
    GateUnmet {
        head: &'static str,
        accuracy: f64,
        required: f64,
    },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("unknown experiment `{name}`; registered: {registry}")]
    UnknownExperiment { name: String, registry: String },

    #[error("missing prerequisite {what}; build it with `{command}`")]
    MissingPrerequisite { what: String, command: String },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
