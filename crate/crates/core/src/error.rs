use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),
    #[error("unsupported image format: {0}")]
    UnsupportedFormat(PathBuf),
    #[error("corrupt image data in {path}: {reason}")]
    CorruptData { path: PathBuf, reason: String },
    #[error("cannot write {path}: {reason}")]
    WriteFailure { path: PathBuf, reason: String },
    #[error("invalid size: {0}")]
    InvalidSize(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("dataset is empty: {0}")]
    EmptyDataset(String),
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error("failed to load sample {id}: {reason}")]
    LoadFailure { id: String, reason: String },
    #[error("crop {crop} larger than image {height}x{width}")]
    CropTooLarge { crop: usize, height: usize, width: usize },
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("number of depth ranges must be at least 2, got {0}")]
    InvalidK(usize),
    #[error("bad configuration: {0}")]
    BadConfig(String),
    #[error("feature extractor unavailable: {0}")]
    ExtractorUnavailable(String),
    #[error("number of loss steps must be at least 1, got {0}")]
    InvalidM(usize),
    #[error("epoch {epoch} outside 0..={total}")]
    InvalidEpoch { epoch: usize, total: usize },
    #[error("data error in sample {id}: {reason}")]
    DataError { id: String, reason: String },
    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),
    #[error("no source images to synthesize from")]
    InsufficientSources,
    #[error("image too small for the metric: {0}")]
    TooSmall(String),
    #[error(transparent)]
    Tensor(#[from] derefl_autograd::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Whether the failure is a missing file, weight set or backend.
    pub fn is_missing_resource(&self) -> bool {
        matches!(
            self,
            Error::MissingFile(_)
                | Error::BackendUnavailable(_)
                | Error::ExtractorUnavailable(_)
                | Error::EmptyDataset(_)
                | Error::InsufficientSources
        )
    }
}
