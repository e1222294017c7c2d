use std::path::PathBuf;

use diffcore::DiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },
    #[error("missing files: {}", .0.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "))]
    Manifest(Vec<PathBuf>),
    #[error("data error: {0}")]
    Data(String),
    #[error("capacity error: {0}")]
    Capacity(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("synthesis error: {0}")]
    Synthesis(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error(transparent)]
    Numeric(#[from] DiffError),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl Error {
    /// Process exit code for the CLI: 2 config, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Capacity(_) => 2,
            Error::Format { .. } | Error::Manifest(_) | Error::Data(_) | Error::Io { .. } | Error::Synthesis(_) => 3,
            Error::Numeric(_) | Error::Degenerate(_) | Error::Contract(_) => 4,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
