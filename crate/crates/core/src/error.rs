use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("batch needs at least 2 samples, got {0}")]
    BatchTooSmall(usize),

    #[error("batch spans multiple views ({0} and {1})")]
    MixedViews(usize, usize),

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("view {0} has no foreground pixels")]
    NoForeground(usize),

    #[error("unknown view {0}")]
    UnknownView(usize),

    #[error("no view has two or more grouped features; set the threshold manually")]
    ThresholdUndetermined,

    #[error("instance placement failed after {0} attempts; use fewer instances or a bigger canvas")]
    PlacementFailed(usize),

    #[error("no view layout covered every instance twice and every instance pair once after {0} draws; add views or widen the view window")]
    ViewCoverageFailed(usize),

    #[error("point count mismatch: scene has {scene}, checkpoint has {checkpoint}")]
    PointCountMismatch { scene: usize, checkpoint: usize },

    #[error("malformed file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("json error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn malformed(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Malformed {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
