use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("index {index} out of range for a set of {count} frames")]
    Range { index: usize, count: usize },

    #[error("ingestion error for frame `{frame_id}`: {reason}")]
    Ingestion { frame_id: String, reason: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("depth provider error: {0}")]
    Provider(String),

    #[error("weight load error: {0}")]
    Load(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("wiring error: {0}")]
    Wiring(String),

    #[error("non-finite {term} loss{}", .step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    NonFinite { term: String, step: Option<usize> },

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("compatibility error: {0}")]
    Compatibility(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Parameter(_) | Error::Compatibility(_) | Error::Wiring(_) => 2,
            Error::Range { .. }
            | Error::Ingestion { .. }
            | Error::Schema(_)
            | Error::Provider(_)
            | Error::Load(_)
            | Error::Alignment(_)
            | Error::Io(_)
            | Error::Image(_)
            | Error::Json(_) => 3,
            Error::NonFinite { .. } | Error::Shape(_) | Error::Tensor(_) => 4,
        }
    }
}
