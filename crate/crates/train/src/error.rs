use thiserror::Error;

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum TrainError {
    /// Missing, unreadable or truncated files.
    #[error("I/O error: {0}")]
    Io(String),

    /// Well-formed bytes that describe an inconsistent dataset.
    #[error("format error: {0}")]
    Format(String),

    /// Checkpoint content does not match its stored hash.
    #[error("checkpoint corruption: {0}")]
    Corruption(String),

    /// Unknown checkpoint version or architecture descriptor.
    #[error("checkpoint version error: {0}")]
    Version(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// Reconstruction reports produced under different settings.
    #[error("comparability error: {0}")]
    Comparability(String),

    /// NaN or infinite loss during optimization.
    #[error("training diverged: {0}")]
    Diverged(String),

    #[error(transparent)]
    Core(#[from] feedkit_core::Error),
}

impl TrainError {
    /// True for errors caused by the run description rather than by
    /// execution.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            TrainError::Config(_)
                | TrainError::Comparability(_)
                | TrainError::Core(
                    feedkit_core::Error::Config(_) | feedkit_core::Error::Parameter(_)
                )
        )
    }

    pub(crate) fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        TrainError::Io(format!("{}: {e}", path.display()))
    }
}

impl From<csv::Error> for TrainError {
    fn from(e: csv::Error) -> Self {
        TrainError::Io(e.to_string())
    }
}
