//! Error types shared across the crate.

use thiserror::Error;

/// Errors raised by tensor primitives and the autodiff graph.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("unknown parameter {0}")]
    UnknownParam(String),
    #[error("gradient/parameter mismatch for {name}: {detail}")]
    GradMismatch { name: String, detail: String },
}

/// Errors raised by phantom synthesis and dataset persistence.
#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("invalid generation parameter: {0}")]
    InvalidParams(String),
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("dataset of {0} subjects is too small to populate all splits")]
    TooFewSubjects(usize),
    #[error("dataset io: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("corrupt dataset: {0}")]
    Corrupt(String),
}

/// Errors raised while saving or loading checkpoints.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected CFCKPT01")]
    BadMagic,
    #[error("descriptor: {0}")]
    Descriptor(#[from] serde_json::Error),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

/// Errors raised by the training loops.
#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at step {step} ({arm}); last good checkpoint retained")]
    NonFiniteLoss { step: u64, arm: &'static str },
    #[error("non-finite loss value")]
    NonFiniteValue,
    #[error("inactive subject {0} fed to the generator")]
    InactiveSubject(String),
    #[error("empty batch: {0}")]
    EmptyBatch(&'static str),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Phantom(#[from] PhantomError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("training io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Invalid(String),
}

/// Errors raised by the evaluation kit.
#[derive(Debug, Error)]
pub enum EvalError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("empty target mask")]
    EmptyTargetMask,
    #[error("all-zero difference map")]
    AllZeroDiff,
    #[error("report io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Phantom(#[from] PhantomError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("image encode: {0}")]
    Image(String),
}

/// Errors raised while parsing or validating run configuration.
#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config io: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}
