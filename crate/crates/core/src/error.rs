use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("input too short: need at least {needed} samples, got {got}")]
    TooShort { needed: usize, got: usize },

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid config key `{key}`{}", suggestion.as_ref().map(|s| format!(", did you mean `{s}`?")).unwrap_or_default())]
    UnknownKey { key: String, suggestion: Option<String> },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("unsupported variant: {0}")]
    UnsupportedVariant(String),

    #[error("variant mismatch: {0}")]
    VariantMismatch(String),

    #[error("lookup failed: {0}")]
    Lookup(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("training diverged at epoch {epoch}, batch {batch}; diagnostic written to {dump}")]
    Divergence { epoch: usize, batch: usize, dump: PathBuf },

    #[error("incompatible inputs: {0}")]
    Incompatible(String),

    #[error("integrity check failed: {0}")]
    Integrity(String),

    #[error("serialization: {0}")]
    Serde(String),
}

impl Error {
    /// Short machine-parsable class, printed by the CLI on failure.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Contract(_) => "contract",
            Error::TooShort { .. } => "too-short",
            Error::Format { .. } => "format",
            Error::Io { .. } => "io",
            Error::UnknownKey { .. } | Error::Config(_) => "config",
            Error::UnsupportedVariant(_) => "unsupported-variant",
            Error::VariantMismatch(_) => "variant-mismatch",
            Error::Lookup(_) => "lookup",
            Error::Protocol(_) => "protocol",
            Error::Divergence { .. } => "divergence",
            Error::Incompatible(_) => "incompatible",
            Error::Integrity(_) => "integrity",
            Error::Serde(_) => "serde",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

/// Shorthand for returning a contract violation.
macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::Contract(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
