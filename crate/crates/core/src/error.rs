use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid resolution {0}: must be a power of two >= 16 and match the model")]
    InvalidResolution(usize),
    #[error("downsample factor {factor} does not divide resolution {resolution}")]
    InvalidFactor { factor: usize, resolution: usize },
    #[error("tag map is empty")]
    EmptyTags,
    #[error("unknown tag key `{0}`")]
    UnknownTag(String),
    #[error("malformed tag value `{value}` for key `{key}`")]
    MalformedTag { key: String, value: String },
    #[error("external captioning requested but no client is configured")]
    ClientUnavailable,
    #[error("external captioner failed after {attempts} attempts: {message}")]
    ClientFailed { attempts: usize, message: String },
    #[error("corpus needs at least 10 scenes, got {0}")]
    CorpusTooSmall(usize),
    #[error("latent was produced by codec `{found}`, expected `{expected}`")]
    CodecMismatch { expected: String, found: String },
    #[error("identity codec has no parameters to train")]
    NothingToTrain,
    #[error("unknown token `{0}`")]
    UnknownToken(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("stage order violation: {0}")]
    StageOrderError(String),
    #[error("gallery of {gallery} items is smaller than k = {k}")]
    GalleryTooSmall { gallery: usize, k: usize },
    #[error("invalid noise schedule: {0}")]
    InvalidSchedule(String),
    #[error("timestep {t} outside 1..={max}")]
    InvalidTimestep { t: usize, max: usize },
    #[error("shape mismatch: {0}")]
    ShapeError(String),
    #[error("classifier-free guidance needs a model trained with condition dropout")]
    GuidanceUnsupported,
    #[error("epoch {epoch} outside 0..{total}")]
    InvalidEpoch { epoch: usize, total: usize },
    #[error("resume mismatch: {0}")]
    ResumeMismatch(String),
    #[error("K must be at least 1")]
    InvalidK,
    #[error("no candidates to rank")]
    EmptyCandidates,
    #[error("top-k {topk} must be smaller than K = {k}")]
    InvalidTopK { topk: usize, k: usize },
    #[error("fine-tuning subset is empty")]
    EmptySubset,
    #[error("empty evaluation set")]
    EmptySet,
    #[error("need at least {needed} samples, got {got}")]
    InsufficientSamples { needed: usize, got: usize },
    #[error("feature extraction failed: {0}")]
    FeatureError(String),
    #[error("classifier reached {accuracy:.3} train accuracy (< {target:.3}) with seed {seed}")]
    AccuracyNotReached { accuracy: f64, target: f64, seed: u64 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}
