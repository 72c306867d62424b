use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("vocabulary error: {0}")]
    Vocabulary(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("parse error in {file}:{line}: {msg}")]
    Parse {
        file: PathBuf,
        line: u64,
        msg: String,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Prefixes the message with `ctx`, keeping the variant (and exit code).
    pub fn context(self, ctx: impl std::fmt::Display) -> Self {
        match self {
            Error::Dimension { op, detail } => Error::Dimension {
                op,
                detail: format!("{ctx}: {detail}"),
            },
            Error::Numeric(m) => Error::Numeric(format!("{ctx}: {m}")),
            Error::Contract(m) => Error::Contract(format!("{ctx}: {m}")),
            Error::Input(m) => Error::Input(format!("{ctx}: {m}")),
            Error::Config(m) => Error::Config(format!("{ctx}: {m}")),
            Error::Vocabulary(m) => Error::Vocabulary(format!("{ctx}: {m}")),
            Error::Metric(m) => Error::Metric(format!("{ctx}: {m}")),
            Error::Parse { file, line, msg } => Error::Parse {
                file,
                line,
                msg: format!("{ctx}: {msg}"),
            },
            other => other,
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Input(_)
            | Error::Parse { .. }
            | Error::Io { .. }
            | Error::Vocabulary(_)
            | Error::Metric(_)
            | Error::Serde(_) => 1,
            Error::Config(_) | Error::Contract(_) => 2,
            Error::Numeric(_) | Error::Dimension { .. } => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
