use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by every module of the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("unit {unit} out of range for vocabulary of size {vocab_size}")]
    UnitOutOfRange { unit: u32, vocab_size: u32 },

    #[error("vocabulary size {0} exceeds the private-use-area capacity of 6400 characters")]
    PuaCapacity(u32),

    #[error("character at index {index} (U+{codepoint:04X}) is not a unit character")]
    CharDecode { index: usize, codepoint: u32 },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("duplicate utterance id `{0}`")]
    DuplicateId(String),

    #[error("invalid utterance id `{0}`: must be non-empty without tab or newline")]
    InvalidId(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    #[error("need at least {k} frames for k-means, got {frames}")]
    TooFewFrames { k: usize, frames: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("frame {0} has zero norm and cannot be compared by cosine similarity")]
    ZeroNormFrame(usize),

    #[error("utterance `{0}` has no transcript")]
    MissingTranscript(String),

    #[error("pair `{0}` has no target score")]
    MissingTarget(String),

    #[error("pair `{0}` contains consecutive duplicate units; run dedup first")]
    NotDeduplicated(String),

    #[error("correlation is undefined: {0} is constant")]
    ConstantInput(&'static str),

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("score {value} at index {index} lies outside [0, 1]")]
    ScoreOutOfRange { index: usize, value: f64 },

    #[error("missing predictions or targets for pairs: {0:?}")]
    MissingScores(Vec<String>),

    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(usize),

    #[error("model file: {0}")]
    ModelFormat(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
