use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Core(#[from] prunelab::Error),

    #[error("config line {line}: {reason}")]
    Config { line: usize, reason: String },

    #[error("invalid {what} `{input}`: {reason}")]
    Parse { what: &'static str, input: String, reason: String },

    #[error("{0}")]
    Invalid(String),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, HarnessError>;
