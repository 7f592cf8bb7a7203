use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("manifest {path}, line {line}: {message}")]
    Manifest { path: PathBuf, line: u64, message: String },

    #[error("duplicate video_id `{0}`")]
    DuplicateVideoId(String),

    #[error("video `{video_id}` references unknown study_id `{study_id}`")]
    DanglingStudy { video_id: String, study_id: String },

    #[error("invalid split fractions: {0}")]
    InvalidFractions(String),

    #[error("titration subset empty: floor({ratio} * {total}) = 0")]
    TitrationEmpty { ratio: f64, total: usize },

    #[error("invalid ratio {0}: must lie in (0, 1]")]
    InvalidRatio(f64),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("video format error: {0}")]
    VideoFormat(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid permutation: {0}")]
    Permutation(String),

    #[error("factorial head too large: {k}! exceeds 10080 classes")]
    FactorialHeadTooLarge { k: usize },

    #[error("non-finite embedding in row {0}")]
    NonFiniteEmbedding(usize),

    #[error("target {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },

    #[error("reorder loss supplied in {0} mode")]
    UnexpectedReorderLoss(&'static str),

    #[error("reorder loss missing in echoclr mode")]
    MissingReorderLoss,

    #[error("no eligible studies: {0}")]
    NoEligibleStudies(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}; videos: {videos:?}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        videos: Vec<String>,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint encoder mismatch: {}", .0.join(", "))]
    EncoderMismatch(Vec<String>),

    #[error("AUROC undefined: {0}")]
    AurocUndefined(&'static str),

    #[error("AUPR undefined: no positive labels")]
    AuprUndefined,

    #[error("empty video list for study `{0}`")]
    EmptyStudy(String),

    #[error("degenerate bootstrap: {discarded} of {total} replicates undefined")]
    DegenerateBootstrap { discarded: usize, total: usize },

    #[error("split leakage: study `{0}` appears in more than one split")]
    SplitLeakage(String),

    #[error("image encoding error: {0}")]
    Image(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
