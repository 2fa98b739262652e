use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the scoring engine and its file formats.
#[derive(Debug, Error)]
pub enum MsdError {
    #[error("vector norm below 1e-12")]
    ZeroVector,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("vectors need at least 2 dimensions, got {0}")]
    DimTooSmall(usize),
    #[error("empty input")]
    EmptyInput,
    #[error("mean pooling cancelled to the zero vector")]
    DegeneratePooling,
    #[error("cannot fit a mixture to an empty embedding set")]
    EmptyData,
    #[error("row is not a probability vector (sum {sum})")]
    NotAProbabilityRow { sum: f64 },
    #[error("{what} = {value} is outside its valid range")]
    OutOfRange { what: &'static str, value: f64 },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("mixtures use different concentrations ({left} vs {right})")]
    KappaMismatch { left: f64, right: f64 },
    #[error("grid {rows}x{cols} does not cover {count} patches")]
    GridMismatch {
        rows: usize,
        cols: usize,
        count: usize,
    },
    #[error("masking would remove every patch")]
    AllMasked,
    #[error("no candidates to score")]
    EmptyCandidates,
    #[error("no instances to evaluate")]
    EmptyEval,
    #[error("rank correlation undefined: constant input")]
    DegenerateRanks,
    #[error("bootstrap needs at least 2 clusters, found {0}")]
    TooFewClusters(usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid mixture: {0}")]
    InvalidMixture(String),

    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported container version {0}")]
    VersionUnsupported(u32),
    #[error("bad container header: {0}")]
    BadHeader(String),
    #[error("payload truncated at byte {offset} (expected {expected} bytes)")]
    TruncatedPayload { offset: usize, expected: usize },
    #[error("row {row} has norm below 1e-6")]
    DegenerateRow { row: usize },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error("referenced file does not exist: {}", .0.display())]
    MissingPath(PathBuf),
    #[error("score file mixes config fingerprints `{0}` and `{1}`")]
    FingerprintMismatch(String, String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = MsdError> = std::result::Result<T, E>;
