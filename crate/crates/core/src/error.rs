use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("invalid sequence: {0}")]
    InvalidSequence(String),

    #[error("unknown shape id {0}")]
    UnknownShapeId(usize),

    #[error("unknown trajectory id {0}")]
    UnknownTrajId(usize),

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("model dim {dim} is not divisible by {heads} heads")]
    HeadDivisibility { dim: usize, heads: usize },

    #[error("function is not deterministic: {first} != {second}")]
    NonDeterministicFunction { first: f64, second: f64 },

    #[error("parameter `{0}` has no gradient")]
    MissingGradient(String),

    #[error("step {step} outside schedule range [0, {total}]")]
    StepOutOfRange { step: usize, total: usize },

    #[error("k = {k} outside [1, {max}]")]
    KOutOfRange { k: usize, max: usize },

    #[error("trajectory too short: T = {0}, need at least 2")]
    TooShort(usize),

    #[error("label {label} outside [0, {classes})")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("too few frames after dropout: {remaining} remain")]
    TooFewFrames { remaining: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Divergence {
        epoch: usize,
        step: usize,
        loss: f64,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: (usize, usize), rhs: (usize, usize)) -> Self {
        Error::Shape { op, lhs, rhs }
    }
}
