use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid metadata: {0}")]
    InvalidMetadata(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),

    #[error("schema violation in {}: {msg}", .path.display())]
    Schema { path: PathBuf, msg: String },

    #[error("tile store does not match metadata for slide {slide_id}: {msg}")]
    TileMismatch { slide_id: String, msg: String },

    #[error("out of range: {0}")]
    Range(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("corrupted action log: {0}")]
    Corruption(String),

    #[error("missing score for {slide_id} {criterion} at ({x},{y},{w},{h})")]
    MissingScore {
        slide_id: String,
        criterion: String,
        x: u32,
        y: u32,
        w: u32,
        h: u32,
    },

    #[error("slide {slide_id} patch ({x},{y}): {source}")]
    AtPatch {
        slide_id: String,
        x: u32,
        y: u32,
        #[source]
        source: Box<Error>,
    },

    #[error("io error on {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable short code, used by the CLI exit path and the HTTP layer.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidMetadata(_) => "invalid_metadata",
            Error::Validation(_) => "validation",
            Error::MissingFile(_) => "missing_file",
            Error::Schema { .. } => "schema",
            Error::TileMismatch { .. } => "tile_mismatch",
            Error::Range(_) => "range",
            Error::Unsupported(_) => "unsupported",
            Error::Contract(_) => "contract",
            Error::NotFound(_) => "not_found",
            Error::Precondition(_) => "precondition",
            Error::Corruption(_) => "corruption",
            Error::MissingScore { .. } => "missing_score",
            Error::AtPatch { source, .. } => source.code(),
            Error::Io { .. } => "io",
            Error::Image(_) => "image",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }
}
