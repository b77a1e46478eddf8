use std::path::PathBuf;

/// Errors surfaced by the toolkit.
///
/// The variants are coarse categories; the CLI prints the category as the
/// first token of its error line.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller violated an operation's precondition (shape, finiteness, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A configuration file or override is malformed or inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// A required input artifact is absent.
    #[error("missing artifact: {kind} at {path}")]
    MissingArtifact { kind: &'static str, path: PathBuf },

    /// A stored artifact does not match what it is being used with.
    #[error("artifact mismatch: {0}")]
    Mismatch(String),

    /// A scripted expert could not produce a successful demonstration.
    #[error("expert failure: {0}")]
    Expert(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    /// Short category tag used on CLI error lines.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Contract(_) => "contract",
            Error::Config(_) => "config",
            Error::MissingArtifact { .. } => "missing-artifact",
            Error::Mismatch(_) => "mismatch",
            Error::Expert(_) => "expert",
            Error::Io { .. } => "io",
            Error::Serde(_) => "serde",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::Contract(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
