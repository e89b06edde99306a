//! Triple plausibility scorers, their losses and training.
//!
//! Three native scorers are provided: a text classifier over rendered
//! sequences ([`classifier`]) and the TransE and DistMult embedding models
//! ([`embedding`]). An external model can be plugged in through
//! [`crate::bridge::BridgeScorer`]. All of them implement [`Scorer`].

pub mod checkpoint;
pub mod classifier;
pub mod embedding;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{EntityId, KnowledgeGraph, RelationId, Triple};
use crate::ingest::DatasetBundle;

pub use classifier::ClassifierState;
pub use embedding::{EmbeddingState, Norm};

/// Probabilities are clamped to `[EPS, 1 - EPS]` inside the losses.
pub const PROB_EPS: f64 = 1e-12;

/// Two-class triple score. `p0` is the plausible class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector {
    pub p0: f64,
    pub p1: f64,
}

impl ScoreVector {
    /// Softmax over the two logits.
    pub fn from_logits(z0: f64, z1: f64) -> ScoreVector {
        // p0 = sigmoid(z0 - z1), computed on the side that cannot overflow.
        let d = z0 - z1;
        let p0 = if d >= 0.0 {
            1.0 / (1.0 + (-d).exp())
        } else {
            let e = d.exp();
            e / (1.0 + e)
        };
        ScoreVector { p0, p1: 1.0 - p0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationDistribution {
    pub probs: Vec<f64>,
}

impl RelationDistribution {
    pub fn from_logits(logits: &[f64]) -> RelationDistribution {
        RelationDistribution {
            probs: softmax(logits),
        }
    }

    pub fn uniform(r: usize) -> RelationDistribution {
        RelationDistribution {
            probs: vec![1.0 / r as f64; r],
        }
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Summed binary cross-entropy over positives (`label == 1`, scored by
/// `p0`) and negatives (`label == 0`, scored by `p1`).
pub fn triple_loss(scores: &[ScoreVector], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: scores.len(),
            right: labels.len(),
        });
    }
    Ok(-scores
        .iter()
        .zip(labels)
        .map(|(s, &y)| {
            let y = f64::from(y);
            y * clamp_prob(s.p0).ln() + (1.0 - y) * clamp_prob(s.p1).ln()
        })
        .sum::<f64>())
}

/// Summed negative log-probability of each sample's true relation.
pub fn relation_loss(dists: &[RelationDistribution], true_relations: &[RelationId]) -> Result<f64> {
    if dists.len() != true_relations.len() {
        return Err(Error::LengthMismatch {
            left: dists.len(),
            right: true_relations.len(),
        });
    }
    let mut loss = 0.0;
    for (d, r) in dists.iter().zip(true_relations) {
        let p = d.probs.get(r.index()).ok_or(Error::RelationOutOfRange {
            id: r.index(),
            count: d.probs.len(),
        })?;
        loss -= clamp_prob(*p).ln();
    }
    Ok(loss)
}

/// Gradient of one triple's cross-entropy term with respect to the two
/// logits of its [`ScoreVector`].
pub fn triple_loss_logit_grad(z0: f64, z1: f64, label: u8) -> [f64; 2] {
    let s = ScoreVector::from_logits(z0, z1);
    let y = f64::from(label);
    [s.p0 - y, s.p1 - (1.0 - y)]
}

/// Gradient of one sample's relation cross-entropy with respect to the
/// relation logits: `softmax(z) - onehot(r)`.
pub fn relation_loss_logit_grad(logits: &[f64], r: RelationId) -> Vec<f64> {
    let mut g = softmax(logits);
    g[r.index()] -= 1.0;
    g
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Triple classification.
    Tc,
    /// Link prediction.
    Lp,
    /// Relation prediction.
    Rp,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Tc => "tc",
            Task::Lp => "lp",
            Task::Rp => "rp",
        }
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Task> {
        match s.to_ascii_lowercase().as_str() {
            "tc" => Ok(Task::Tc),
            "lp" => Ok(Task::Lp),
            "rp" => Ok(Task::Rp),
            _ => Err(Error::Unknown {
                kind: "task",
                name: s.to_owned(),
            }),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScorerKind {
    Classifier,
    Transe,
    Distmult,
    Bridge,
}

impl ScorerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScorerKind::Classifier => "classifier",
            ScorerKind::Transe => "transe",
            ScorerKind::Distmult => "distmult",
            ScorerKind::Bridge => "bridge",
        }
    }
}

impl FromStr for ScorerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<ScorerKind> {
        match s.to_ascii_lowercase().as_str() {
            "classifier" | "text" => Ok(ScorerKind::Classifier),
            "transe" => Ok(ScorerKind::Transe),
            "distmult" => Ok(ScorerKind::Distmult),
            "bridge" => Ok(ScorerKind::Bridge),
            _ => Err(Error::Unknown {
                kind: "scorer",
                name: s.to_owned(),
            }),
        }
    }
}

impl fmt::Display for ScorerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Objective DistMult is trained with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingLoss {
    /// `max(0, margin + s(neg) - s(pos))`
    Margin,
    /// Two-class cross-entropy on `sigmoid(score)`.
    CrossEntropy,
}

/// Which triples count as positives when corrupting training triples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeFilter {
    /// Train, dev and test positives.
    AllSplits,
    TrainOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub negative_ratio: usize,
    pub dropout: f64,
    pub seed: u64,
    pub adam_betas: (f64, f64),
    pub adam_epsilon: f64,
    /// Draw fresh negatives every epoch instead of once per run.
    pub resample_negatives: bool,
    pub negative_filter: NegativeFilter,
    /// Classifier hidden width `H`.
    pub hidden_size: usize,
    pub max_len: usize,
    /// Embedding width for TransE / DistMult.
    pub embedding_dim: usize,
    pub margin: f64,
    pub norm: Norm,
    pub embedding_loss: EmbeddingLoss,
    /// L2 penalty on the embedding rows of each batch.
    pub weight_decay: f64,
}

pub const DEFAULT_SEED: u64 = 42;

impl TrainConfig {
    /// Text-classifier regime: batch 32, learning rate 5e-5, dropout 0.1;
    /// 3 epochs with 1 negative per positive for classification, 5 epochs
    /// with 5 negatives for link prediction, 20 epochs for relation
    /// prediction.
    pub fn classifier(task: Task) -> TrainConfig {
        let (epochs, negative_ratio) = match task {
            Task::Tc => (3, 1),
            Task::Lp => (5, 5),
            Task::Rp => (20, 1),
        };
        TrainConfig {
            batch_size: 32,
            learning_rate: 5e-5,
            epochs,
            negative_ratio,
            dropout: 0.1,
            seed: DEFAULT_SEED,
            adam_betas: (0.9, 0.999),
            adam_epsilon: 1e-8,
            resample_negatives: false,
            negative_filter: NegativeFilter::AllSplits,
            hidden_size: 128,
            max_len: crate::textgen::DEFAULT_MAX_LEN,
            embedding_dim: 100,
            margin: 1.0,
            norm: Norm::L2,
            embedding_loss: EmbeddingLoss::Margin,
            weight_decay: 0.0,
        }
    }

    /// Embedding-model regime, independent of the task.
    pub fn embedding(kind: ScorerKind) -> TrainConfig {
        let base = TrainConfig::classifier(Task::Lp);
        match kind {
            ScorerKind::Distmult => TrainConfig {
                batch_size: 128,
                learning_rate: 0.01,
                epochs: 100,
                negative_ratio: 5,
                dropout: 0.0,
                resample_negatives: true,
                embedding_dim: 100,
                embedding_loss: EmbeddingLoss::CrossEntropy,
                weight_decay: 1e-4,
                ..base
            },
            _ => TrainConfig {
                batch_size: 128,
                learning_rate: 0.01,
                epochs: 100,
                negative_ratio: 5,
                dropout: 0.0,
                resample_negatives: true,
                embedding_dim: 100,
                margin: 1.0,
                norm: Norm::L2,
                embedding_loss: EmbeddingLoss::Margin,
                ..base
            },
        }
    }

    pub fn defaults(kind: ScorerKind, task: Task) -> TrainConfig {
        match kind {
            ScorerKind::Transe | ScorerKind::Distmult => TrainConfig::embedding(kind),
            _ => TrainConfig::classifier(task),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_owned()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if self.negative_ratio == 0 {
            return bad("negative_ratio must be at least 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        let (b1, b2) = self.adam_betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if self.adam_epsilon <= 0.0 {
            return bad("adam_epsilon must be positive");
        }
        if self.hidden_size == 0 || self.embedding_dim == 0 {
            return bad("hidden_size and embedding_dim must be positive");
        }
        if self.margin < 0.0 || self.weight_decay < 0.0 {
            return bad("margin and weight_decay must be non-negative");
        }
        Ok(())
    }

    pub(crate) fn adam(&self) -> crate::optim::AdamConfig {
        crate::optim::AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_betas.0,
            beta2: self.adam_betas.1,
            epsilon: self.adam_epsilon,
        }
    }
}

/// A trained model able to score triples. Higher scores are more
/// plausible. Implementations must be read-only while scoring.
pub trait Scorer: Sync {
    /// One plausibility score per triple.
    fn score_triples(&self, kg: &KnowledgeGraph, triples: &[Triple]) -> Result<Vec<f64>>;

    /// Score of every relation `r` (indexed by id) for the pair
    /// `(head, tail)`. Defaults to triple scores of `(head, r, tail)`.
    fn relation_scores(
        &self,
        kg: &KnowledgeGraph,
        head: EntityId,
        tail: EntityId,
    ) -> Result<Vec<f64>> {
        let candidates: Vec<Triple> = kg
            .relation_ids()
            .map(|relation| Triple {
                head,
                relation,
                tail,
            })
            .collect();
        self.score_triples(kg, &candidates)
    }

    /// Score at or above which a triple is classified as plausible, when
    /// the model has a natural one.
    fn decision_threshold(&self) -> Option<f64> {
        None
    }
}

/// Any trained native model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "state", rename_all = "lowercase")]
#[allow(clippy::large_enum_variant)]
pub enum Model {
    Classifier(ClassifierState),
    Transe(EmbeddingState),
    Distmult(EmbeddingState),
}

impl Model {
    pub fn kind(&self) -> ScorerKind {
        match self {
            Model::Classifier(_) => ScorerKind::Classifier,
            Model::Transe(_) => ScorerKind::Transe,
            Model::Distmult(_) => ScorerKind::Distmult,
        }
    }

    fn scorer(&self) -> &dyn Scorer {
        match self {
            Model::Classifier(s) => s,
            Model::Transe(s) | Model::Distmult(s) => s,
        }
    }
}

impl Scorer for Model {
    fn score_triples(&self, kg: &KnowledgeGraph, triples: &[Triple]) -> Result<Vec<f64>> {
        self.scorer().score_triples(kg, triples)
    }

    fn relation_scores(
        &self,
        kg: &KnowledgeGraph,
        head: EntityId,
        tail: EntityId,
    ) -> Result<Vec<f64>> {
        self.scorer().relation_scores(kg, head, tail)
    }

    fn decision_threshold(&self) -> Option<f64> {
        self.scorer().decision_threshold()
    }
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct Trained {
    pub model: Model,
    /// Training objective before the first update, over the first epoch's
    /// samples.
    pub initial_loss: f64,
    /// Summed objective per epoch, accumulated during the epoch.
    pub epoch_losses: Vec<f64>,
}

/// Trains a native scorer of `kind` on `bundle.train` for `task`.
pub fn train(
    kind: ScorerKind,
    bundle: &DatasetBundle,
    task: Task,
    cfg: &TrainConfig,
) -> Result<Trained> {
    cfg.validate()?;
    if bundle.train.is_empty() {
        return Err(Error::InvalidConfig("training split is empty".into()));
    }
    match kind {
        ScorerKind::Classifier => classifier::train(bundle, task, cfg),
        ScorerKind::Transe | ScorerKind::Distmult => embedding::train(kind, bundle, cfg),
        ScorerKind::Bridge => Err(Error::Unsupported("training a bridge scorer")),
    }
}
