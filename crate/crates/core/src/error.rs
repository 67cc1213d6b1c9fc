use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised anywhere in the analysis / generation / resynthesis pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed WAV data: {0}")]
    MalformedWav(String),

    #[error("unsupported audio encoding: {0}")]
    UnsupportedCodec(String),

    #[error("audio payload has zero length")]
    ZeroLength,

    #[error("audio too short: {samples} samples, need at least {required}")]
    AudioTooShort { samples: usize, required: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("posteriorgram row {row} has no probability mass")]
    DegenerateRow { row: usize },

    #[error("malformed {kind} file: {reason}")]
    Format { kind: &'static str, reason: String },

    #[error("no voiced frames available")]
    NoVoicedFrames,

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("missing embedding for word {0}")]
    MissingEmbedding(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("empty word contour bank for speaker {0}")]
    EmptyBank(String),

    #[error("voiced/unvoiced mismatch at frame {frame}")]
    VuvMismatch { frame: usize },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
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
