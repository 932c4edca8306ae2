//! Shared error type for the core library.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum CoreError {
    #[error("invalid range: {0}")]
    InvalidRange(String),

    #[error("shape mismatch: expected {expected:?}, got {got:?} ({context})")]
    ShapeMismatch {
        expected: Vec<usize>,
        got: Vec<usize>,
        context: String,
    },

    #[error("step index {t} outside [{lo}, {hi}]")]
    StepOutOfRange { t: usize, lo: usize, hi: usize },

    #[error("log-variance undefined at t=1 (posterior variance is zero); enable the clamped floor policy")]
    VarianceFloorRequired,

    #[error("zero-vector result in spherical interpolation (norm {norm:.3e} < {min:.3e})")]
    ZeroVector { norm: f64, min: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },

    #[error("writer index {index} out of range (writer count {count})")]
    WriterIndex { index: usize, count: usize },

    #[error("universe infeasible: {0}")]
    InfeasibleUniverse(String),

    #[error("writer style out of range: {0}")]
    StyleOutOfRange(String),

    #[error("manifest line {line}: missing file {path}")]
    MissingFile { line: usize, path: String },

    #[error("manifest line {line}: undecodable image {path}: {detail}")]
    UndecodableImage {
        line: usize,
        path: String,
        detail: String,
    },

    #[error("manifest line {line}: duplicate path {path}")]
    DuplicatePath { line: usize, path: String },

    #[error("manifest line {line}: malformed record: {detail}")]
    MalformedRecord { line: usize, detail: String },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("checkpoint mismatch in field `{field}`: checkpoint has {found}, expected {expected}")]
    CheckpointMismatch {
        field: String,
        found: String,
        expected: String,
    },

    #[error("empty category {0} in classifier training set")]
    EmptyCategory(usize),

    #[error("category {0} not covered by the oracle classifier")]
    CategoryNotCovered(usize),

    #[error("probability row {row} sums to {sum}, outside 1 ± {tol}")]
    NonNormalizedRow { row: usize, sum: f64, tol: f64 },

    #[error("matrix not positive semi-definite: eigenvalue {0:.3e} below tolerance")]
    IndefiniteMatrix(f64),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error at {path}: {detail}")]
    ImageCodec { path: String, detail: String },
}

impl CoreError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        CoreError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type CoreResult<T> = Result<T, CoreError>;
