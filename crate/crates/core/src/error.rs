use alloc::string::String;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("empty story")]
    EmptyStory,
    #[error("no scenario for first clip")]
    FirstClipScenario,
    #[error("index {index} out of range 1..={len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("labels are not in canonical first-appearance order at position {position}")]
    NotCanonical { position: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite feature value")]
    NonFinite,
    #[error("decision {decision} out of range for a bank of {threads} threads")]
    DecisionOutOfRange { decision: usize, threads: usize },
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("story {0} has no ground truth")]
    MissingGroundTruth(String),
    #[error("ground truth length {labels} does not match {clips} clips")]
    GroundTruthLength { labels: usize, clips: usize },
    #[error("source offsets must increase within each thread")]
    OffsetsNotIncreasing,
    #[error("non-finite loss in story {0}")]
    NonFiniteLoss(String),
    #[error("need at least two clips for pairwise metrics")]
    TooFewClips,
    #[error("value {value} exceeds supported range {max}")]
    OutOfSupportedRange { value: usize, max: usize },
    #[error("cannot split {total} into {parts} positive parts")]
    BadComposition { total: usize, parts: usize },
    #[error("stream too short: need {needed} timesteps, have {available}")]
    StreamTooShort { needed: usize, available: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("empty {0}")]
    Empty(&'static str),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
