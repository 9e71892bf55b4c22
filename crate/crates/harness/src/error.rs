use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("config parse error: {0}")]
    Parse(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error(transparent)]
    Core(#[from] rrkf::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl HarnessError {
    pub fn config(field: &str, message: impl Into<String>) -> Self {
        HarnessError::Config { field: field.into(), message: message.into() }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
