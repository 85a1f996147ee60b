use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("architecture mismatch: {0}")]
    Architecture(String),

    #[error("config error: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("frozen router parameters changed during fine-tuning")]
    RouterMutated,

    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }

    /// Short machine-readable tag, used by the command line for one-line diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::InvalidArgument(_) => "invalid-argument",
            Error::Format(_) => "format",
            Error::Version { .. } => "version",
            Error::Architecture(_) => "architecture",
            Error::Config(_) => "config",
            Error::Diverged { .. } => "diverged",
            Error::RouterMutated => "router-mutated",
            Error::MissingFile(_) => "missing-file",
            Error::Io { .. } => "io",
        }
    }
}
