use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("node {node} has no incoming edges")]
    IsolatedNode { node: usize },

    #[error("non-finite values in {context}")]
    NonFinite { context: String },

    #[error("numeric failure in layer {layer}")]
    NumericFailure { layer: usize },

    #[error("volume contains no nonzero voxels")]
    EmptyBrain,

    #[error("channel {channel} has a zero percentile reference")]
    DegenerateChannel { channel: usize },

    #[error("no supervoxels left after outlier removal")]
    EmptyGraph,

    #[error("malformed {kind} file: {reason}")]
    Format { kind: &'static str, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("nifti: {0}")]
    Nifti(#[from] nifti::NiftiError),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(kind: &'static str, reason: impl Into<String>) -> Self {
        Error::Format {
            kind,
            reason: reason.into(),
        }
    }
}
