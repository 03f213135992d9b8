use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum HarnessError {
    /// Bad configuration or arguments.
    #[error("{0}")]
    Usage(String),
    #[error("cannot read config {path}: {source}")]
    ConfigRead {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config {path} is malformed: {message}")]
    ConfigParse { path: PathBuf, message: String },
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] mpdlab_core::Error),
}

impl HarnessError {
    /// Process exit status: 2 for usage errors, 3 when the denoiser backend
    /// cannot be reached, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Usage(_) | HarnessError::ConfigRead { .. } | HarnessError::ConfigParse { .. } => 2,
            HarnessError::Core(
                mpdlab_core::Error::InvalidInput(_)
                | mpdlab_core::Error::DegenerateCondition(_)
                | mpdlab_core::Error::NotRecorded(_),
            ) => 2,
            HarnessError::Core(mpdlab_core::Error::BackendUnavailable(_)) => 3,
            _ => 1,
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        HarnessError::Io {
            context: context.into(),
            source,
        }
    }
}

pub(crate) fn usage(message: impl Into<String>) -> HarnessError {
    HarnessError::Usage(message.into())
}
