use alloc::string::String;
use alloc::vec::Vec;

use thiserror::Error;

/// Failures of tensor construction, forward ops and the backward pass.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("shape {shape:?} has a zero extent")]
    EmptyExtent { shape: Vec<usize> },
    #[error("shape {shape:?} needs {} values, got {len}", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
    #[error("log of non-positive value {value}")]
    LogDomain { value: f64 },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("index {index} out of range for extent {extent}")]
    IndexOutOfRange { index: usize, extent: usize },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("backward called on an empty tape")]
    EmptyTape,
    #[error("backward already ran on this tape; call zero_grad first")]
    BackwardTwice,
    #[error("variable does not belong to this tape")]
    UnknownVar,
}

/// Invalid model or layer configuration, or inputs that violate it.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("input of {frames} frames is shorter than the conv kernel {kernel}")]
    InputTooShort { frames: usize, kernel: usize },
    #[error("zero-length input")]
    EmptyInput,
    #[error("token id {id} outside vocabulary of {vocab}")]
    TokenOutOfVocab { id: u32, vocab: usize },
    #[error("missing parameter {0}")]
    MissingParameter(String),
    #[error("parameter {name} has shape {found:?}, expected {expected:?}")]
    ParameterShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("sequence of {len} positions exceeds max_positions {max}")]
    TooLong { len: usize, max: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Errors of the agreement objective and its building blocks.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ObjectiveError {
    #[error("{0} sequence is empty")]
    EmptySequence(&'static str),
    #[error("special token {id} inside {which}")]
    SpecialToken { which: &'static str, id: u32 },
    #[error("target id {id} outside vocabulary of {vocab}")]
    TargetOutOfVocab { id: u32, vocab: usize },
    #[error("distributions over {0} and {1} tokens cannot be compared")]
    VocabMismatch(usize, usize),
    #[error("layout spans disagree: {0}")]
    SpanMismatch(String),
    #[error("lambda must be non-negative, got {0}")]
    NegativeLambda(f64),
    #[error("label smoothing must lie in [0, 1), got {0}")]
    Smoothing(f64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Corpus, vocabulary and batching errors.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum DataError {
    #[error("character {0:?} is outside the source alphabet")]
    Alphabet(char),
    #[error("invalid corpus parameters: {0}")]
    InvalidRange(String),
    #[error("example {id} needs {tokens} target tokens, over the batch budget of {budget}")]
    OverBudget { id: String, tokens: usize, budget: usize },
    #[error("empty text")]
    EmptyText,
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
}

/// Optimization failures.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error("non-finite gradient for {param}")]
    NonFiniteGradient { param: String },
    #[error("loss diverged at step {step}")]
    Diverged { step: u64 },
    #[error("checkpoints disagree on model config")]
    ConfigMismatch,
    #[error("no checkpoints to average")]
    NoCheckpoints,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("{0}")]
    Hook(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Search and decode failures.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum DecodeError {
    #[error("beam size must be at least 1")]
    BeamSize,
    #[error("max_len must be at least 1")]
    MaxLen,
    #[error("no stop tokens given")]
    NoStopTokens,
    #[error("empty encoder memory")]
    EmptyMemory,
    #[error("start tag {0} is not a language tag")]
    StartTag(u32),
    #[error("every continuation is banned or impossible")]
    NoCandidates,
    #[error("path {0} is not a full dual-segment path")]
    NotFullPath(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Metric precondition failures.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricError {
    #[error("empty reference")]
    EmptyReference,
    #[error("empty hypothesis set")]
    EmptyCorpus,
    #[error("{refs} references for {hyps} hypotheses")]
    LengthMismatch { refs: usize, hyps: usize },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
}
