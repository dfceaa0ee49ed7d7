use thiserror::Error;

/// Errors produced anywhere in the counting pipeline.
///
/// File-format problems are split into distinct variants (magic, version,
/// shape, payload length, non-finite values) so callers can tell a corrupt
/// header from a truncated payload.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("bad magic bytes (expected \"DAVT\")")]
    BadMagic,

    #[error("unsupported container version {0}")]
    UnsupportedVersion(u8),

    #[error("invalid shape: {0}")]
    Shape(String),

    #[error("payload length mismatch: expected {expected} values, found {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid bounding box ({x1}, {y1}, {x2}, {y2})")]
    InvalidBox { x1: f32, y1: f32, x2: f32, y2: f32 },

    #[error("degenerate exemplar: zero-area box")]
    DegenerateExemplar,

    #[error("degenerate embedding: zero vector before normalization")]
    DegenerateEmbedding,

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("no objects detected")]
    NoCandidates,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("scene error: {0}")]
    Scene(String),

    #[error("box placement failed after {0} attempts")]
    PlacementFailed(usize),
}

pub type Result<T> = std::result::Result<T, Error>;
