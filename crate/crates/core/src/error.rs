use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty viewport")]
    EmptyViewport,

    #[error("stale artifacts: {0}")]
    StaleArtifacts(String),

    #[error("gaussian not in view: {0}")]
    GaussianNotInView(usize),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("image smaller than {window}x{window} window: {width}x{height}")]
    ImageTooSmall {
        width: usize,
        height: usize,
        window: usize,
    },

    #[error("invalid camera: {0}")]
    InvalidCamera(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("malformed ply: {0}")]
    MalformedPly(String),

    #[error("attribute count mismatch: {0}")]
    AttributeMismatch(String),

    #[error("no training views")]
    NoViews,

    #[error("non-finite loss at iteration {iteration}: {detail}")]
    NonFinite { iteration: usize, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Exit code used by the command line: 2 for I/O and file-format
    /// problems, 3 for numerical aborts, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. }
            | Error::Image { .. }
            | Error::MalformedPly(_)
            | Error::AttributeMismatch(_)
            | Error::Json(_) => 2,
            Error::NonFinite { .. } => 3,
            _ => 1,
        }
    }

    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::EmptyViewport => "empty_viewport",
            Error::StaleArtifacts(_) => "stale_artifacts",
            Error::GaussianNotInView(_) => "not_in_view",
            Error::DimensionMismatch(_) => "dimension_mismatch",
            Error::ImageTooSmall { .. } => "image_too_small",
            Error::InvalidCamera(_) => "invalid_camera",
            Error::InvalidConfig(_) => "invalid_config",
            Error::MalformedPly(_) => "malformed_ply",
            Error::AttributeMismatch(_) => "attribute_mismatch",
            Error::NoViews => "no_views",
            Error::NonFinite { .. } => "non_finite",
            Error::Io { .. } => "io",
            Error::Image { .. } => "image",
            Error::Json(_) => "json",
        }
    }
}
