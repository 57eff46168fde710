use std::path::PathBuf;

/// Errors produced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("{dim} of {len} is not divisible by scale factor {scale}")]
    NotDivisible {
        dim: &'static str,
        len: usize,
        scale: usize,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    #[error("size mismatch: {0}")]
    SizeMismatch(String),

    #[error("unsupported element type: {0}")]
    UnsupportedElementType(String),

    #[error("malformed header: {0}")]
    Header(String),

    #[error("degenerate intensity window: {0}")]
    DegenerateWindow(String),

    #[error("foreground threshold {threshold} could not be satisfied after {retries} retries")]
    ForegroundExhausted { threshold: f64, retries: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("image error: {0}")]
    Image(String),

    #[error("report error: {0}")]
    Report(String),
}

/// Coarse error class, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Input,
    Io,
    Numeric,
}

impl ErrorCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCategory::Input => "input",
            ErrorCategory::Io => "io",
            ErrorCategory::Numeric => "numeric",
        }
    }
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Io { .. } | Error::MissingFile(_) | Error::Image(_) => ErrorCategory::Io,
            Error::NonFinite(_) => ErrorCategory::Numeric,
            _ => ErrorCategory::Input,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
