use thiserror::Error;

use crate::datagen::Source;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("backward called without a recorded forward pass")]
    NoForwardCache,

    #[error("treatment index {t} out of range for {n_arms} arms")]
    InvalidTreatment { t: usize, n_arms: usize },

    #[error("invalid assignment probabilities: {0}")]
    InvalidProbabilities(String),

    #[error("moment batch contains {0} observational rows")]
    NonRandomizedRows(usize),

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("dataset has no {0} rows")]
    MissingSource(Source),

    #[error("non-finite objective at step {step}")]
    Divergence {
        step: usize,
        trace: Box<crate::estimators::TrainTrace>,
    },

    #[error("dataset carries no synthetic generation record")]
    NotSynthetic,

    #[error("treatment arm {0} has no rows")]
    EmptyArm(usize),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("qini requires both treated and control rows")]
    SingleArm,

    #[error("no randomized mass on the structural set")]
    NoStructuralSet,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, FusionError>;
