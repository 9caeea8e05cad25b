use std::path::PathBuf;

use seqintent_tensor::TensorError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("line {line}: parse error: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid `{field}`{}: {message}", location(*.line))]
    Validation {
        line: Option<usize>,
        field: String,
        message: String,
    },

    #[error("schema mismatch{}: found {found}, expected {expected}", differing(.fields))]
    SchemaMismatch {
        expected: String,
        found: String,
        fields: Vec<String>,
    },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn differing(fields: &[String]) -> String {
    if fields.is_empty() {
        String::new()
    } else {
        format!(" in {}", fields.join(", "))
    }
}

fn location(line: Option<usize>) -> String {
    line.map(|l| format!(" on line {l}")).unwrap_or_default()
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            line: None,
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn at_line(self, line: usize) -> Self {
        match self {
            Error::Validation { field, message, .. } => Error::Validation {
                line: Some(line),
                field,
                message,
            },
            other => other,
        }
    }

    /// Process exit code: 2 config, 3 data validation, 4 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::SchemaMismatch { .. } => 2,
            Error::Parse { .. } | Error::Validation { .. } | Error::Io { .. } | Error::Json(_) => 3,
            Error::Numeric(_) | Error::Tensor(_) => 4,
        }
    }
}
