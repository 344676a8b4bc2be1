use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An input lies outside the domain of an operation (joint limits, workspace, reach).
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("scene has no objects")]
    EmptyScene,

    #[error("trajectory alignment error: {0}")]
    Alignment(String),

    #[error("trajectory cache is stale: cache tag {cache}, generator tag {generator}")]
    StaleCache { cache: String, generator: String },

    #[error("trajectory generation failed for cell {cell}: {source}")]
    CellGeneration { cell: usize, source: Box<Error> },

    #[error("trajectory generation failed for target #{index}: {source}")]
    TargetGeneration { index: usize, source: Box<Error> },

    #[error("corrupt model: {0}")]
    CorruptModel(String),

    #[error("load error: {0}")]
    Load(#[from] LoadError),

    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("incomplete task: {placements} of {expected} objects placed")]
    IncompleteTask { placements: usize, expected: usize },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Failures while decoding one of the binary or JSON file formats.
#[derive(Debug, Error)]
pub enum LoadError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("unsupported version {0}")]
    Version(u32),

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("checksum mismatch: header {expected}, computed {computed}")]
    Checksum { expected: String, computed: String },

    #[error("malformed content: {0}")]
    Malformed(String),
}
