use thiserror::Error;

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Core(#[from] adaanchor::Error),
    #[error("{0}")]
    Argument(String),
    #[error("checkpoint does not match configuration: {0}")]
    Compatibility(String),
    #[error("reports are not comparable: {0}")]
    Comparability(String),
    #[error("malformed JSON in {path}: {message}")]
    Json { path: String, message: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl HarnessError {
    pub fn category(&self) -> &'static str {
        match self {
            HarnessError::Core(e) => e.category(),
            HarnessError::Argument(_) => "argument",
            HarnessError::Compatibility(_) => "compatibility",
            HarnessError::Comparability(_) => "comparability",
            HarnessError::Json { .. } => "config",
            HarnessError::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
