use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("frame of {height}x{width} is not divisible by codec factor {factor}")]
    NotDivisible {
        height: usize,
        width: usize,
        factor: usize,
    },

    #[error("channel mismatch: expected {expected}, got {got}")]
    ChannelMismatch { expected: usize, got: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("unknown codec `{0}`")]
    UnknownCodec(String),

    #[error("conv-in layer is already expanded")]
    AlreadyExpanded,

    #[error("temporal layers are already inserted")]
    AlreadyTemporal,

    #[error("reference bank has an entry for site `{0}` which is not a mid or up attention site")]
    UnknownSite(String),

    #[error("reference latent must hold a single frame, got {0}")]
    MultiFrameReference(usize),

    #[error("temporal init rejected, mismatched layers:\n{}", .0.join("\n"))]
    TemporalMismatch(Vec<String>),

    #[error("unknown perturbation plugin `{0}`")]
    UnknownPlugin(String),

    #[error("video too short: clip needs {needed} frames, video has {available}")]
    VideoTooShort { needed: usize, available: usize },

    #[error("clip has no gaze metadata")]
    MissingGaze,

    #[error("invalid mixture proportions {0:?}: must be non-negative and sum to 1")]
    InvalidProportions([f64; 3]),

    #[error("all sample pools are empty")]
    EmptyPools,

    #[error("invalid window plan: window {window}, overlap {overlap}, total {total}")]
    InvalidWindow {
        total: usize,
        window: usize,
        overlap: usize,
    },

    #[error("frame {0} is not covered by any window")]
    CoverageHole(usize),

    #[error("stage `{stage}` requires a `{required}` checkpoint, found `{found}`")]
    StageOrder {
        stage: String,
        required: String,
        found: String,
    },

    #[error("checkpoint not found: {0}")]
    MissingCheckpoint(PathBuf),

    #[error("checkpoint is invalid: {0}")]
    BadCheckpoint(String),

    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(usize),

    #[error("frozen parameters changed during training: {}", .0.join(", "))]
    FrozenChanged(Vec<String>),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }
}
