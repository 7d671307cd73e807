use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {0}")]
    NotFound(PathBuf),

    #[error("unsupported audio format: {0}")]
    UnsupportedFormat(String),

    #[error("waveform too short: {samples} samples, need at least {needed}")]
    TooShort { samples: usize, needed: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite activation in {0}")]
    NonFiniteActivation(String),

    #[error("non-finite gradient for tensor {0}")]
    NonFiniteGradient(String),

    #[error("non-finite score at index {0}")]
    NonFiniteScore(usize),

    #[error("invalid state: {0}")]
    State(String),

    #[error("zero-norm vector: {0}")]
    ZeroNorm(String),

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("noise has zero energy")]
    ZeroEnergyNoise,

    #[error("speech waveform is empty")]
    EmptySpeech,

    #[error("impulse response is empty")]
    EmptyImpulse,

    #[error("augmentation pool is empty: {0}")]
    EmptyPool(String),

    #[error("empty set: {0}")]
    EmptySet(String),

    #[error("class {0} has no reference items")]
    EmptyClass(String),

    #[error("trial set needs both target and nontarget trials")]
    DegenerateLabels,

    #[error("unknown label: {0}")]
    UnknownLabel(String),

    #[error("missing utterance: {0}")]
    MissingUtterance(String),

    #[error("empty enrollment for {0}")]
    EmptyEnrollment(String),

    #[error("infeasible synthetic corpus spec: {0}")]
    InfeasibleSpec(String),

    #[error("infeasible split: {0}")]
    InfeasibleSplit(String),

    #[error("infeasible trial generation: {0}")]
    InfeasibleTrials(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("checkpoint version {found} not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn parse(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            location: location.into(),
            message: message.into(),
        }
    }
}
