use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("no face found for identity {identity}")]
    NoFaceFound { identity: usize },

    #[error("target {height}x{width} too small for {cells} composite cells")]
    TargetTooSmall { height: usize, width: usize, cells: usize },

    #[error("non-finite parameter `{0}`")]
    NonFiniteParams(String),

    #[error("layer {layer} out of range (have {count})")]
    LayerOutOfRange { layer: usize, count: usize },

    #[error("index {index} out of range for {count} identities")]
    IndexOutOfRange { index: i64, count: usize },

    #[error("invalid mode `{0}`")]
    ModeInvalid(String),

    #[error("lora rank {rank} invalid for a {rows}x{cols} matrix")]
    RankInvalid { rank: usize, rows: usize, cols: usize },

    #[error("timestep {t} out of range (schedule has {len})")]
    TimestepOutOfRange { t: usize, len: usize },

    #[error("region for identity {identity} out of bounds")]
    RegionOutOfBounds { identity: usize },

    #[error("invalid latent grid: {0}")]
    GridInvalid(String),

    #[error("routing-loss weight must be non-negative, got {0}")]
    LambdaNegative(f64),

    #[error("invalid condition-mode probabilities: {0}")]
    ProbsInvalid(String),

    #[error("corpus is empty")]
    CorpusEmpty,

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("frozen parameter `{0}` changed during training")]
    FreezeViolation(String),

    #[error("checkpoint version {found} does not match expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("corrupt checkpoint: {0}")]
    CorruptFile(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("invalid stride: {0}")]
    StrideInvalid(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Candle(#[from] candle_core::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
