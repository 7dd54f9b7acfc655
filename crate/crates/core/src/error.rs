use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid range: min {min} > max {max}")]
    InvalidRange { min: f64, max: f64 },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("length mismatch: {what} ({left} vs {right})")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },

    #[error("rotation is not orthonormal (max deviation {deviation:e}, det {det})")]
    NotOrthonormal { deviation: f64, det: f64 },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("invalid value: {0}")]
    Invalid(String),

    #[error("class index {class} out of range for {num_classes} classes")]
    InvalidClass { class: u32, num_classes: usize },

    #[error("point index {index} out of range for {len} points")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("no ground truth available: {0}")]
    MissingGroundTruth(&'static str),

    #[error("segmentation failed: {0}")]
    Segmentation(String),

    #[error("missing result for view {index}: {path}")]
    MissingResult { index: usize, path: PathBuf },

    #[error("unknown estimator '{0}' (expected hard_sum, soft_sum or soft_compound)")]
    UnknownEstimator(String),

    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }
}
