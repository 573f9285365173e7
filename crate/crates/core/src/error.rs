use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse error class, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Io,
    Shape,
    Numeric,
}

impl ErrorCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCategory::Config => "config",
            ErrorCategory::Io => "io",
            ErrorCategory::Shape => "shape",
            ErrorCategory::Numeric => "numeric",
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: malformed WAV: {reason}")]
    MalformedWav { path: PathBuf, reason: String },

    #[error("{path}: sample rate {found} Hz, expected {expected} Hz")]
    SampleRate {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("{path}: malformed manifest line {line}: {reason}")]
    MalformedManifest {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("{path}: malformed weight file: {reason}")]
    MalformedWeights { path: PathBuf, reason: String },

    #[error("missing parameter tensor `{0}`")]
    MissingParam(String),

    #[error("unexpected parameter tensor `{0}` for this model configuration")]
    UnexpectedParam(String),

    #[error("shape mismatch in {context}: {detail}")]
    Shape { context: String, detail: String },

    #[error("numeric failure in {context}: {detail}")]
    Numeric { context: String, detail: String },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            context: context.into(),
            detail: detail.into(),
        }
    }

    pub fn numeric(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric {
            context: context.into(),
            detail: detail.into(),
        }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) => ErrorCategory::Config,
            Error::Io { .. } | Error::MalformedWav { .. } | Error::SampleRate { .. } => {
                ErrorCategory::Io
            }
            Error::MalformedManifest { .. } | Error::MalformedWeights { .. } => ErrorCategory::Io,
            Error::MissingParam(_) | Error::UnexpectedParam(_) | Error::Shape { .. } => {
                ErrorCategory::Shape
            }
            Error::Numeric { .. } => ErrorCategory::Numeric,
        }
    }
}
