//! Crate-wide error type.
//!
//! Every fallible operation returns [`Error`]; variants carry enough
//! structure (shapes, names, counts) for callers to act on them without
//! parsing message strings.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    // ---- tensors and tape ----
    #[error("shape mismatch: left {left:?} vs right {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },

    #[error("data length {len} does not match shape {shape:?} (product {expected})")]
    LengthMismatch {
        shape: Vec<usize>,
        len: usize,
        expected: usize,
    },

    #[error("matmul expects [m,k]x[k,n]; got {left:?} x {right:?}")]
    MatmulShape { left: Vec<usize>, right: Vec<usize> },

    #[error("paired image sets differ in length: {before} before vs {after} after")]
    PairedSets { before: usize, after: usize },

    #[error("variables belong to different tapes")]
    TapeMismatch,

    #[error("backward was already run on this tape")]
    TapeConsumed,

    #[error("backward requires a scalar loss; got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("cosine similarity undefined for near-zero norm (|a| = {left_norm:.3e}, |b| = {right_norm:.3e})")]
    ZeroNorm { left_norm: f64, right_norm: f64 },

    #[error("optimizer learning rate must be positive; got {lr}")]
    BadLearningRate { lr: f64 },

    #[error("optimizer state holds {state} slots but {params} parameters were given")]
    OptimizerStateMismatch { state: usize, params: usize },

    // ---- world ----
    #[error("unknown attribute name {name:?}")]
    UnknownAttribute { name: String },

    #[error("unknown direction name {name:?}")]
    UnknownDirection { name: String },

    // ---- diffusion ----
    #[error("invalid noise schedule: {reason}")]
    BadSchedule { reason: String },

    #[error("timestep {t} outside valid range 1..={t_max}")]
    TimestepOutOfRange { t: usize, t_max: usize },

    #[error("noise source exhausted: needed {needed} draws, provided {provided}")]
    NoiseExhausted { needed: usize, provided: usize },

    #[error("model parameters must be frozen for this operation (found {unfrozen} trainable tensors)")]
    NotFrozen { unfrozen: usize },

    #[error("frozen parameter checksum changed during optimization ({which})")]
    ChecksumChanged { which: String },

    #[error("unknown activation kind {name:?} (expected one of: softplus, tanh)")]
    UnknownActivation { name: String },

    // ---- transfer ----
    #[error("loss became non-finite at iteration {iteration}; last good direction retained")]
    NonFiniteLoss {
        iteration: usize,
        last_good: Box<crate::transfer::DirectionEmbedding>,
    },

    #[error("direction has near-zero norm ({norm:.3e}); nothing to normalize")]
    DegenerateDirection { norm: f64 },

    #[error("direction file has k = {found}, model expects k = {expected}")]
    KMismatch { expected: usize, found: usize },

    // ---- editing ----
    #[error("edit window [{lo}, {hi}] invalid; need 0 <= lo < hi <= 1")]
    BadWindow { lo: f64, hi: f64 },

    #[error("edit spec names {directions} directions but {strengths} strengths")]
    EditArity { directions: usize, strengths: usize },

    // ---- checkpoint container ----
    #[error("checkpoint magic mismatch: expected \"GTFW\", found {found:?}")]
    BadMagic { found: [u8; 4] },

    #[error("checkpoint version {found} unsupported (expected {expected})")]
    BadVersion { expected: u32, found: u32 },

    #[error("checkpoint truncated: needed {needed} bytes, file holds {available}")]
    Truncated { needed: usize, available: usize },

    #[error("checkpoint tensor {name:?}: payload holds {found} values, header shape {shape:?} needs {expected}")]
    PayloadShape {
        name: String,
        shape: Vec<usize>,
        expected: usize,
        found: usize,
    },

    #[error("checkpoint missing tensor {name:?}")]
    MissingTensor { name: String },

    #[error("checkpoint has {extra} trailing bytes after the last declared tensor")]
    TrailingBytes { extra: usize },

    #[error("checkpoint holds unexpected tensor {name:?}")]
    UnexpectedTensor { name: String },

    // ---- reports and configs ----
    #[error("config field {field}: {reason}")]
    BadConfig { field: String, reason: String },

    #[error("hash mismatch in {path}: manifest says {expected}, file hashes to {found}")]
    HashMismatch {
        path: String,
        expected: String,
        found: String,
    },

    #[error("artifact {path} embeds config hash {found}, tree manifest says {expected}")]
    ForeignArtifact {
        path: String,
        expected: String,
        found: String,
    },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }
}
