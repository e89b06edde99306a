//! Knowledge graph completion toolkit.
//!
//! Triples are rendered as `[CLS] head [SEP] relation [SEP] tail [SEP]` token
//! sequences (or `[CLS] head [SEP] tail [SEP]` entity pairs for relation
//! prediction) and scored by pluggable [`Scorer`]s:
//!
//! * a native text classifier with a two-class triple head and an
//!   `R`-way relation head, both trained with cross-entropy,
//! * TransE and DistMult embedding baselines,
//! * an external scorer reached over a newline-delimited JSON protocol
//!   ([`bridge`]).
//!
//! Evaluation follows the filtered setting for link and relation
//! prediction and reports MR, MRR, Hits@N, triple-classification accuracy
//! and per-relation / per-cardinality breakdowns.

pub mod bridge;
pub mod error;
pub mod eval;
pub mod graph;
pub mod ingest;
pub mod optim;
pub mod sampling;
pub mod scorers;
pub mod textgen;

pub use error::{Error, Result};
pub use eval::{EvalReport, RankResult};
pub use graph::{
    Cardinality, EntityId, KnowledgeGraph, RelationCardinality, RelationId, Side, Triple, TripleSet,
};
pub use ingest::DatasetBundle;
pub use sampling::LabeledTriple;
pub use scorers::{Scorer, ScorerKind, Task, TrainConfig};
pub use textgen::{InputSequence, Token, TokenKind};
