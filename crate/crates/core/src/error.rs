use thiserror::Error;

/// Errors surfaced by the tensor engine, model assembly and I/O layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Stable machine-readable kind tag, used by the CLI error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Config(_) => "config",
            Error::Contract(_) => "contract",
            Error::Format(_) => "format",
            Error::Metric(_) => "metric",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
