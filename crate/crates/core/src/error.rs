use std::path::PathBuf;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("non-finite value at {site}")]
    NonFinite { site: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("injection error: {0}")]
    Injection(String),

    #[error("branch mismatch: {0}")]
    Branch(String),

    #[error("adapter wiring error: {0}")]
    Wiring(String),

    #[error("trace for layer {layer} was not captured")]
    MissingTrace { layer: usize },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn non_finite(site: impl Into<String>) -> Self {
        Error::NonFinite { site: site.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Process exit code for command-line harnesses: 2 config, 3 numeric, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Input(_) | Error::Wiring(_) | Error::Format { .. } => 2,
            Error::NonFinite { .. }
            | Error::Shape(_)
            | Error::Domain(_)
            | Error::Contract(_)
            | Error::Injection(_)
            | Error::Branch(_)
            | Error::MissingTrace { .. }
            | Error::UndefinedMetric(_) => 3,
            Error::Io { .. } => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
