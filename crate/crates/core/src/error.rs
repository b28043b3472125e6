use thiserror::Error;

pub type Result<T, E = AodError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum AodError {
    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("training diverged: non-finite activation at step {step} ({layer})")]
    Divergence { step: usize, layer: &'static str },

    #[error("degenerate roi: box lies outside the feature map")]
    DegenerateRoi,

    #[error("image {height}x{width} is smaller than the backbone minimum {min}x{min}")]
    UndersizedImage { height: usize, width: usize, min: usize },

    #[error("parse error at `{path}`: {message}")]
    Parse { path: String, message: String },

    #[error("unsupported schema_version {found} (expected {expected})")]
    SchemaVersion { found: u64, expected: u64 },

    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl AodError {
    pub(crate) fn parse(path: impl Into<String>, message: impl Into<String>) -> Self {
        AodError::Parse {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        AodError::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Process exit code used by the command-line front end.
    ///
    /// 0 ok, 1 usage, 2 validation, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            AodError::NonFinite(_)
            | AodError::NonFiniteGradient(_)
            | AodError::Divergence { .. } => 3,
            _ => 2,
        }
    }
}
