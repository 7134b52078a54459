use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the pipeline. Variants map onto the failure categories
/// surfaced by the command-line front end.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("no free floor cell within {radius} m of instance {instance_id}")]
    GoalUnreachable { instance_id: u32, radius: f64 },

    #[error("numeric error in {location}: {detail}")]
    Numeric { location: String, detail: String },

    #[error("backend error: {0}")]
    Backend(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("integrity error: {detail} ({})", path.display())]
    Integrity { path: PathBuf, detail: String },

    #[error("cannot sample pairs: {0}")]
    CannotSample(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("missing dependency artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("io error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn numeric(location: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric {
            location: location.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
