use std::path::PathBuf;

/// Errors raised anywhere in the library.
///
/// Variants are grouped so callers (the CLI in particular) can map them onto
/// exit codes: [`Error::is_data_validation`] and [`Error::is_numerical`].
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("data validation: {0}")]
    DataValidation(String),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}

impl Error {
    pub fn data(msg: impl Into<String>) -> Self {
        Error::DataValidation(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
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

    pub fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn is_data_validation(&self) -> bool {
        matches!(self, Error::DataValidation(_) | Error::Parse { .. } | Error::Io { .. })
    }

    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
