use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("bad magic: expected \"MTC1\", found {found:?}")]
    BadMagic { found: [u8; 4] },

    #[error("truncated container: need {needed} bytes, have {available}")]
    Truncated { needed: u64, available: u64 },

    #[error("overlapping or unordered tensor offsets at tensor {name:?}")]
    OverlappingOffsets { name: String },

    #[error("tensor {name:?} offset {offset} is not 8-byte aligned")]
    Misaligned { name: String, offset: u64 },

    #[error("malformed container header: {0}")]
    BadHeader(String),

    #[error("non-finite value in tensor {name:?} at element {index}")]
    NonFinite { name: String, index: usize },

    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),

    #[error("tensor {name:?}: {msg}")]
    InvalidTensor { name: String, msg: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("checkpoints are not aligned: {0}")]
    NotAligned(String),

    #[error("invalid model spec: {0}")]
    Spec(String),

    #[error("non-finite activation produced by layer {layer}")]
    NonFiniteActivation { layer: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: u32, classes: usize },

    #[error("eigendecomposition did not converge after {sweeps} sweeps (off-diagonal residual {residual:e})")]
    NoConvergence { sweeps: usize, residual: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing data: {0}")]
    Missing(String),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
