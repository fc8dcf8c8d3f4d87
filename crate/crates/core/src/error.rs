use std::path::PathBuf;

/// Errors produced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid file format: {0}")]
    Format(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("non-finite decoder input")]
    NonFiniteDecoderInput,
    #[error("no initialization points")]
    NoInitPoints,
    #[error("missing pseudo-labels for camera {0} and fallback disabled")]
    MissingPseudoLabels(u32),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("training diverged at iteration {iteration}: {reason}")]
    Diverged {
        iteration: usize,
        reason: String,
        /// State from the most recent snapshot with finite loss and gradients.
        last_good: Box<crate::io::Checkpoint>,
    },
    #[error("external command failed: {0}")]
    External(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad or missing data files.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::Format(_)
                | Error::Dimension(_)
                | Error::InvalidInput(_)
                | Error::NoInitPoints
                | Error::MissingPseudoLabels(_)
                | Error::Json(_)
                | Error::External(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
