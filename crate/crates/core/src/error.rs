use std::path::{Path, PathBuf};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Malformed or out-of-range input data.
    #[error("input error: {0}")]
    Input(String),

    /// Invalid configuration or missing data required by a configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Optimization produced a non-finite value.
    #[error("training fault: {message}{}", last_checkpoint_suffix(.last_checkpoint))]
    TrainingFault {
        message: String,
        last_checkpoint: Option<PathBuf>,
    },

    #[error("incompatible checkpoint version: file has version {found}, this build reads version {expected}")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("missing artifacts: {}", .0.join(", "))]
    MissingArtifacts(Vec<String>),

    #[error("I/O error on {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

fn last_checkpoint_suffix(path: &Option<PathBuf>) -> String {
    match path {
        Some(p) => format!(" (last good checkpoint: {})", p.display()),
        None => " (no checkpoint written yet)".to_string(),
    }
}

impl Error {
    /// True for errors caused by the caller's inputs or configuration rather
    /// than a runtime fault.
    pub fn is_usage_error(&self) -> bool {
        matches!(
            self,
            Error::Input(_)
                | Error::Config(_)
                | Error::CheckpointVersion { .. }
                | Error::MissingArtifacts(_)
        )
    }

    /// Wraps an I/O failure with the path it concerns.
    pub fn io(path: impl AsRef<Path>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.as_ref().to_path_buf();
        move |source| Error::Io { path, source }
    }
}
