use alloc::string::String;

/// Errors raised by the simulator core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("zero-norm vector has no direction")]
    ZeroVector,
    #[error("empty input")]
    EmptyInput,
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("function evaluated to a non-finite value at coordinate {0}")]
    NonFiniteEvaluation(usize),
    #[error("dirichlet concentration must be positive, got {0}")]
    NonPositiveBeta(f64),
    #[error("invalid synthetic data spec: {0}")]
    InvalidSpec(String),
    #[error("unknown architecture preset {0:?}")]
    UnknownArch(String),
    #[error("parameter shapes do not match")]
    ShapeMismatch,
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("no prototype for class {0}")]
    MissingClassPrototype(usize),
    #[error("client {client} has no local prototype for class {class}")]
    ClassAbsentAtClient { client: usize, class: usize },
    #[error("class {0} is not held by any client")]
    ClassUncoveredGlobally(usize),
    #[error("missing upload from client {0}")]
    MissingUpload(usize),
    #[error("dataset has no training samples")]
    EmptyDataset,
    #[error("dataset has no test samples")]
    EmptyTestSet,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("trace too short: {0}")]
    InsufficientTrace(String),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = core::result::Result<T, Error>;
