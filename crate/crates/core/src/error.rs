use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the library can report.
///
/// The CLI maps these onto exit statuses, see [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not line up for an operation.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid configuration value or combination.
    #[error("configuration error: {0}")]
    Config(String),

    /// A file exists but its bytes are not what we expect.
    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("architecture mismatch: expected fingerprint {expected}, found {found}")]
    ArchitectureMismatch { expected: String, found: String },

    /// A dataset lacks something the operation needs, such as labels.
    #[error("data error: {0}")]
    Data(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// Non-finite values where finite ones are required.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Another error, annotated with where it happened.
    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// Process exit status: 1 usage/config, 2 data or format, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Contract(_) => 1,
            Error::Dimension { .. }
            | Error::Format { .. }
            | Error::ArchitectureMismatch { .. }
            | Error::UndefinedMetric(_)
            | Error::Data(_)
            | Error::Io { .. } => 2,
            Error::Numeric(_) => 3,
            Error::Context { source, .. } => source.exit_code(),
        }
    }
}
