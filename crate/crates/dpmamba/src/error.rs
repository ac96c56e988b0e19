use std::path::{Path, PathBuf};

/// Process exit codes.
pub mod exit {
    pub const SUCCESS: u8 = 0;
    pub const USAGE: u8 = 2;
    pub const DATA: u8 = 3;
    pub const NUMERICAL: u8 = 4;
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },

    #[error("{path}: unsupported audio format: {reason}")]
    UnsupportedFormat { path: PathBuf, reason: String },

    #[error("{path}: sample rate {found} Hz does not match the model's {expected} Hz (resampling is not supported)")]
    SampleRate { path: PathBuf, found: u32, expected: u32 },

    #[error("{origin}:{line}: {reason}")]
    Parse { origin: String, line: usize, reason: String },

    #[error("{0}")]
    Format(String),

    #[error("{0}")]
    Usage(String),

    #[error("check failed: {0}")]
    CheckFailed(String),

    #[error(transparent)]
    Core(#[from] dpmamba_core::Error),
}

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }

    pub(crate) fn parse(origin: impl std::fmt::Display, line: usize, reason: impl Into<String>) -> Self {
        Self::Parse { origin: origin.to_string(), line, reason: reason.into() }
    }

    pub fn exit_code(&self) -> u8 {
        use dpmamba_core::Error as Core;
        match self {
            Self::Usage(_) => exit::USAGE,
            Self::CheckFailed(_) | Self::Core(Core::Diverged { .. } | Core::NonFinite(_)) => exit::NUMERICAL,
            _ => exit::DATA,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
