use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot decode image {what}: {source}")]
    Image {
        what: String,
        #[source]
        source: image::ImageError,
    },

    #[error("tensor archive {path}: {message}")]
    Archive { path: PathBuf, message: String },

    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("unsupported device `{0}` (only `cpu` is available)")]
    UnsupportedDevice(String),

    #[error("invalid layer id `{0}`")]
    InvalidLayer(String),

    #[error("layer {layer} is deeper than the loaded network ({available} conv layers)")]
    TapTooDeep { layer: String, available: usize },

    #[error("image {height}x{width} is smaller than the minimum {min}x{min}")]
    ImageTooSmall { height: usize, width: usize, min: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("missing layer {0} in gram map")]
    MissingLayer(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown style `{0}`")]
    UnknownStyle(String),

    #[error("duplicate style `{0}`")]
    DuplicateStyle(String),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint {path} is corrupt: {message}")]
    CorruptCheckpoint { path: PathBuf, message: String },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("non-finite {term} loss at step {step}")]
    NonFiniteLoss { term: &'static str, step: usize },

    #[error("training diverged at step {step}: total loss {total:.4e} exceeds {factor}x the initial {initial:.4e}")]
    Diverged { step: usize, total: f64, initial: f64, factor: f64 },

    #[error("{0}")]
    Csv(#[from] csv::Error),

    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Errors the user fixes by editing the config or flags, as opposed to
    /// failures while running.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::InvalidLayer(_)
                | Error::DuplicateStyle(_)
                | Error::UnsupportedDevice(_)
                | Error::TapTooDeep { .. }
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
