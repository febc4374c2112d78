use thiserror::Error;

/// Errors raised by the IO layer and the CLI plumbing.
#[derive(Debug, Error)]
pub enum IoError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: &'static str, found: String },

    #[error("unsupported {format} version {found} (expected {expected})")]
    VersionMismatch { format: &'static str, expected: u32, found: u32 },

    #[error("truncated file while reading section {section}")]
    Truncated { section: String },

    #[error("structural error in section {section}: {message}")]
    Structure { section: String, message: String },

    #[error("duplicate tensor name {0:?}")]
    DuplicateTensor(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] ssf_core::CoreError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, IoError>;
