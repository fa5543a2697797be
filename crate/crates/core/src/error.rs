use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite (pivot {pivot}: {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("invalid schema: {0}")]
    Schema(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("kernel error: {0}")]
    Kernel(String),

    #[error("natural-gradient step left the positive-definite cone after {halvings} halvings")]
    NaturalGradient { halvings: usize },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("output directory {0} already exists (use --force to overwrite)")]
    OutputExists(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }

    /// Whether this error stems from bad user input (configuration, schema,
    /// arguments) rather than a failure during computation.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Schema(_)
                | Error::InvalidArgument(_)
                | Error::OutputExists(_)
                | Error::Json(_)
                | Error::Data(_)
                | Error::Checkpoint(_)
        )
    }
}
