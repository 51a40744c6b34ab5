use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the detection pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("no {0} backend registered")]
    BackendUnavailable(&'static str),
    #[error("backend {backend} failed: {reason}")]
    BackendFailed { backend: String, reason: String },
    #[error("cannot decode video {path}: {reason}")]
    DecodeError { path: PathBuf, reason: String },
    #[error("no face candidates to choose from")]
    EmptyCandidates,
    #[error("{what}: expected dimension {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("row counts differ: {0}")]
    LengthMismatch(String),
    #[error("landmark index {index} out of range (frame has {len} points)")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("invalid region spec: {0}")]
    InvalidRegionSpec(String),
    #[error("corrupt cache {path}: {reason}")]
    CorruptCache { path: PathBuf, reason: String },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("shape error: {0}")]
    ShapeError(String),
    #[error("need at least 2 slices per class, found {real} real and {fake} fake")]
    InsufficientClassSamples { real: usize, fake: usize },
    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    DivergenceDetected { epoch: usize, loss: f64 },
    #[error("reference set is empty")]
    EmptyReference,
    #[error("m_neighbors = {m} exceeds reference set size {n}")]
    MTooLarge { m: usize, n: usize },
    #[error("video {0} has no slice verdicts")]
    NoSlices(String),
    #[error("standardization stats mismatch: checkpoint has {expected}, input has {got}")]
    StatsMismatch { expected: String, got: String },
    #[error("manifest is empty")]
    EmptyManifest,
    #[error("AUC/EER need both classes; got {real} real and {fake} fake")]
    SingleClassError { real: usize, fake: usize },
    #[error("missing cache for video {video_id}: {path}")]
    MissingCache { video_id: String, path: PathBuf },
    #[error("missing artifact {0}")]
    MissingArtifact(PathBuf),
    #[error("artifact mismatch: {0}")]
    ArtifactMismatch(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
