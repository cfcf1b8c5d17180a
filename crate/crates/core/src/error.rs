use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, FlError>;

#[derive(Error, Debug)]
pub enum FlError {
    #[error("invalid quantifier: {0}")]
    InvalidQuantifier(String),

    #[error("cannot aggregate an empty set of arguments")]
    EmptyAggregation,

    #[error("shape mismatch: expected {expected}, found {found}")]
    Shape { expected: String, found: String },

    #[error("arity mismatch: {expected} weights for {found} arguments")]
    Arity { expected: usize, found: usize },

    #[error("client {0} has no accuracy set")]
    MissingAccuracy(usize),

    #[error("accuracy {value} of client {client_id} is outside [0, 1]")]
    InvalidAccuracy { client_id: usize, value: f64 },

    #[error("client {0} reports zero samples")]
    ZeroSamples(usize),

    #[error("client id {0} appears more than once")]
    DuplicateClient(usize),

    #[error("accuracy list is not sorted in non-increasing order")]
    Unsorted,

    #[error("validation set is empty")]
    EmptyValidation,

    #[error("dataset is empty")]
    EmptyData,

    #[error("training diverged: non-finite loss at epoch {epoch}, step {step}")]
    Divergence { epoch: usize, step: usize },

    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("invalid training config: {0}")]
    InvalidTrainConfig(String),

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("IDX format error: {0}")]
    Format(String),

    #[error("IDX consistency error: {images} images but {labels} labels")]
    Consistency { images: usize, labels: usize },

    #[error("I/O error: {0}")]
    Io(#[from] io::Error),

    #[error("split error: {0}")]
    Split(String),

    #[error("partition error: {0}")]
    Partition(String),

    #[error("no valid derangement: only {0} distinct label(s) present")]
    NoDerangement(usize),

    #[error("invalid federation config: {0}")]
    InvalidConfig(String),

    #[error("round {round}: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<FlError>,
    },
}

impl FlError {
    pub(crate) fn in_round(self, round: usize) -> Self {
        FlError::Round {
            round,
            source: Box::new(self),
        }
    }
}
