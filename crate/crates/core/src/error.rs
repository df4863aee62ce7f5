use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("transform is not rigid: {0}")]
    NonRigid(String),

    #[error("invalid camera rig: {0}")]
    InvalidRig(String),

    #[error("invalid feature level extent {height}x{width}")]
    InvalidLevel { height: f64, width: f64 },

    #[error("polynomial fit is rank deficient: {0}")]
    RankDeficient(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("scene has no visible lanes (frame {frame})")]
    NoVisibleLanes { frame: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("cost matrix contains a non-finite entry at ({row}, {col})")]
    NonFiniteCost { row: usize, col: usize },

    #[error("schema error in {path}: {message}")]
    Schema { path: String, message: String },

    #[error("checkpoint mismatch, differing keys: {}", .0.join(", "))]
    CheckpointMismatch(Vec<String>),

    #[error("output directory {0} is not empty (use --force to overwrite)")]
    OutputNotEmpty(PathBuf),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("image error for {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}
