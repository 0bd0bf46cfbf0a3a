use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Crate-wide error type. Variants are deliberately fine-grained so callers
/// (and tests) can distinguish failure modes without string matching.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config value at `{key}`: {message}")]
    InvalidConfig { key: String, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("corrupt header in {path}: {message}")]
    CorruptHeader { path: PathBuf, message: String },

    #[error("dimension mismatch in {path}: {message}")]
    DimensionMismatch { path: PathBuf, message: String },

    #[error("missing transcript for utterance `{id}`")]
    MissingTranscript { id: String },

    #[error("feature dim mismatch: model expects {expected} channels, input has {got}")]
    InputDimMismatch { expected: usize, got: usize },

    #[error("non-finite activation in layer `{layer}`")]
    NonFiniteActivation { layer: String },

    #[error("CTC-infeasible target: needs {needed} output frames, lattice has {got}")]
    InfeasibleTarget { needed: usize, got: usize },

    #[error("non-finite loss on utterance `{id}`")]
    NonFiniteLoss { id: String },

    #[error("cannot train a language model on an empty corpus")]
    EmptyCorpus,

    #[error("malformed ARPA file at line {line}: {message}")]
    ArpaFormat { line: usize, message: String },

    #[error("ARPA count mismatch for order {order}: header declares {declared}, found {found}")]
    ArpaCountMismatch {
        order: usize,
        declared: usize,
        found: usize,
    },

    #[error("cannot rescore an empty beam")]
    EmptyBeam,

    #[error("missing reference transcript for `{id}`")]
    MissingReference { id: String },

    #[error("augment policy invalid: max_freq_width {width} exceeds feature dim {dim}")]
    MaskWiderThanFeatures { width: usize, dim: usize },

    #[error("in IPL round {round}: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn in_round(self, round: usize) -> Self {
        Error::Round {
            round,
            source: Box::new(self),
        }
    }
}
