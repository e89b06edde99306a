use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: malformed line {line}: {reason}")]
    MalformedLine {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("{path}: file is not valid UTF-8")]
    NotUtf8 { path: PathBuf },

    #[error("dataset too small to split: {0} triples (need at least 3)")]
    DatasetTooSmall(usize),

    #[error("invalid split ratios {0:?}: must be positive and sum to 1")]
    InvalidRatios((f64, f64, f64)),

    #[error("uncategorizable relation {0}: no triples")]
    UncategorizableRelation(usize),

    #[error("unlabeled element: {0:?}")]
    UnlabeledElement(String),

    #[error("max_len {max_len} cannot hold a {elements}-element sequence")]
    MaxLenTooSmall { max_len: usize, elements: usize },

    #[error("saturated relation neighborhood: every replacement of the {side} of {triple} is a known positive")]
    SaturatedNeighborhood { triple: String, side: &'static str },

    #[error("graph needs at least 2 entities to corrupt triples, has {0}")]
    TooFewEntities(usize),

    #[error("length mismatch: {left} scores vs {right} labels")]
    LengthMismatch { left: usize, right: usize },

    #[error("relation id {id} out of range for {count} relations")]
    RelationOutOfRange { id: usize, count: usize },

    #[error("training diverged at epoch {epoch}, step {step}: loss is {loss}")]
    Diverged {
        epoch: usize,
        step: usize,
        loss: f64,
    },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("cannot aggregate an empty rank list")]
    EmptyRanks,

    #[error("cannot compute accuracy over an empty set")]
    EmptyLabeledSet,

    #[error("scorer does not support {0}")]
    Unsupported(&'static str),

    #[error("unknown {kind} {name:?}")]
    Unknown { kind: &'static str, name: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("bridge protocol: {0}")]
    Bridge(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
