//! Native text classifier over rendered sequences.
//!
//! The encoder sums token, segment and position embeddings per position,
//! mean-pools them and applies one `tanh` layer, giving the `[CLS]` vector
//! `C` of width `H`. Two heads read `C`: a two-class triple head `W`
//! (softmax over `W·C`) and an `R`-way relation head `W̄` (softmax over
//! `W̄·C`). Dropout acts on the pooled embedding during training only.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    relation_loss_logit_grad, triple_loss_logit_grad, Model, NegativeFilter, RelationDistribution,
    ScoreVector, Scorer, Task, TrainConfig, Trained, PROB_EPS,
};
use crate::error::{Error, Result};
use crate::graph::{EntityId, KnowledgeGraph, RelationId, Triple};
use crate::ingest::DatasetBundle;
use crate::optim::{Adam, Matrix, Moments, SparseGrad};
use crate::sampling::Corrupter;
use crate::textgen::{self, InputSequence, TokenKind};

pub const UNK_ID: u32 = 0;
pub const CLS_ID: u32 = 1;
pub const SEP_ID: u32 = 2;
const UNK: &str = "[UNK]";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(words: Vec<String>) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Vocabulary { words, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.words
    }
}

impl Default for Vocabulary {
    fn default() -> Self {
        Vocabulary::from(vec![
            UNK.to_owned(),
            textgen::CLS.to_owned(),
            textgen::SEP.to_owned(),
        ])
    }
}

impl Vocabulary {
    pub fn insert(&mut self, word: &str) -> u32 {
        if let Some(&id) = self.index.get(word) {
            return id;
        }
        let id = self.words.len() as u32;
        self.words.push(word.to_owned());
        self.index.insert(word.to_owned(), id);
        id
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK_ID)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Words of every entity and relation sentence used by `triples`, in
    /// first-appearance order.
    pub fn from_triples(kg: &KnowledgeGraph, triples: &[Triple]) -> Result<Vocabulary> {
        let mut vocab = Vocabulary::default();
        let mut seen_e = vec![false; kg.num_entities()];
        let mut seen_r = vec![false; kg.num_relations()];
        for t in triples {
            for e in [t.head, t.tail] {
                if !std::mem::replace(&mut seen_e[e.index()], true) {
                    for tok in textgen::entity_sentence(kg, e)? {
                        vocab.insert(&tok.text);
                    }
                }
            }
            if !std::mem::replace(&mut seen_r[t.relation.index()], true) {
                for tok in textgen::relation_sentence(kg, t.relation)? {
                    vocab.insert(&tok.text);
                }
            }
        }
        Ok(vocab)
    }
}

/// A sequence mapped to embedding row ids.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSequence {
    pub tokens: Vec<u32>,
    pub segments: Vec<u8>,
    /// 0-based rows of the position table.
    pub positions: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierState {
    pub vocab: Vocabulary,
    pub token_embeddings: Matrix,
    pub segment_embeddings: Matrix,
    pub position_embeddings: Matrix,
    pub hidden_weights: Matrix,
    pub hidden_bias: Matrix,
    /// `W`, 2 x H.
    pub triple_head: Matrix,
    /// `W̄`, R x H.
    pub relation_head: Matrix,
    pub dropout_rate: f64,
    pub max_len: usize,
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    /// Pooled embedding after dropout.
    pub pooled: Vec<f64>,
    /// Per-dimension dropout scale (0 or 1/(1-p)); `None` in eval mode.
    pub mask: Option<Vec<f64>>,
    /// The `[CLS]` vector `C`.
    pub cls: Vec<f64>,
}

/// What a training sample is scored against.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Target {
    Triple(u8),
    Relation(RelationId),
}

#[derive(Debug, Clone)]
pub struct Gradients {
    pub token: SparseGrad,
    pub segment: Matrix,
    pub position: SparseGrad,
    pub hidden_weights: Matrix,
    pub hidden_bias: Matrix,
    pub triple_head: Matrix,
    pub relation_head: Matrix,
}

impl Gradients {
    pub fn zeros_like(s: &ClassifierState) -> Gradients {
        let h = s.hidden_size();
        Gradients {
            token: SparseGrad::new(h),
            segment: Matrix::zeros(s.segment_embeddings.rows, h),
            position: SparseGrad::new(h),
            hidden_weights: Matrix::zeros(h, h),
            hidden_bias: Matrix::zeros(1, h),
            triple_head: Matrix::zeros(2, h),
            relation_head: Matrix::zeros(s.relation_head.rows, h),
        }
    }

    fn clear(&mut self) {
        self.token.clear();
        self.position.clear();
        self.segment.fill(0.0);
        self.hidden_weights.fill(0.0);
        self.hidden_bias.fill(0.0);
        self.triple_head.fill(0.0);
        self.relation_head.fill(0.0);
    }
}

impl ClassifierState {
    /// Uniform(-0.1, 0.1) embeddings, Glorot-uniform hidden layer, zero
    /// heads (so every initial triple score is (0.5, 0.5)).
    pub fn init<R: Rng + ?Sized>(
        vocab: Vocabulary,
        num_relations: usize,
        hidden: usize,
        max_len: usize,
        dropout_rate: f64,
        rng: &mut R,
    ) -> ClassifierState {
        let glorot = (6.0 / (2 * hidden) as f64).sqrt();
        ClassifierState {
            token_embeddings: Matrix::uniform(vocab.len(), hidden, 0.1, rng),
            segment_embeddings: Matrix::uniform(2, hidden, 0.1, rng),
            position_embeddings: Matrix::uniform(max_len, hidden, 0.1, rng),
            hidden_weights: Matrix::uniform(hidden, hidden, glorot, rng),
            hidden_bias: Matrix::zeros(1, hidden),
            triple_head: Matrix::zeros(2, hidden),
            relation_head: Matrix::zeros(num_relations, hidden),
            vocab,
            dropout_rate,
            max_len,
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.hidden_weights.rows
    }

    pub fn num_relations(&self) -> usize {
        self.relation_head.rows
    }

    pub fn encode_ids(&self, seq: &InputSequence) -> EncodedSequence {
        EncodedSequence {
            tokens: seq
                .tokens
                .iter()
                .map(|t| match t.kind {
                    TokenKind::Cls => CLS_ID,
                    TokenKind::Sep => SEP_ID,
                    TokenKind::Word => self.vocab.id(&t.text),
                })
                .collect(),
            segments: seq.segment_ids.clone(),
            positions: seq
                .position_ids
                .iter()
                .map(|&p| (p as usize - 1).min(self.position_embeddings.rows - 1) as u32)
                .collect(),
        }
    }

    fn pool(&self, enc: &EncodedSequence) -> Vec<f64> {
        let h = self.hidden_size();
        let mut x = vec![0.0; h];
        for i in 0..enc.tokens.len() {
            let tok = self.token_embeddings.row(enc.tokens[i] as usize);
            let seg = self.segment_embeddings.row(enc.segments[i] as usize);
            let pos = self.position_embeddings.row(enc.positions[i] as usize);
            for k in 0..h {
                x[k] += tok[k] + seg[k] + pos[k];
            }
        }
        let inv = 1.0 / enc.tokens.len().max(1) as f64;
        x.iter_mut().for_each(|v| *v *= inv);
        x
    }

    /// Encoder pass; dropout is applied only when `rng` is given.
    pub fn forward<R: Rng + ?Sized>(&self, enc: &EncodedSequence, rng: Option<&mut R>) -> Forward {
        let mut pooled = self.pool(enc);
        let mask = match rng {
            Some(rng) if self.dropout_rate > 0.0 => {
                let keep = 1.0 - self.dropout_rate;
                let mask: Vec<f64> = (0..pooled.len())
                    .map(|_| {
                        if rng.random_bool(keep) {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    })
                    .collect();
                pooled.iter_mut().zip(&mask).for_each(|(x, m)| *x *= m);
                Some(mask)
            }
            _ => None,
        };
        let mut cls = vec![0.0; self.hidden_size()];
        self.hidden_weights.matvec(&pooled, &mut cls);
        for (c, b) in cls.iter_mut().zip(&self.hidden_bias.data) {
            *c = (*c + b).tanh();
        }
        Forward { pooled, mask, cls }
    }

    /// The `[CLS]` vector `C` in eval mode.
    pub fn encode(&self, seq: &InputSequence) -> Vec<f64> {
        self.forward::<ChaCha8Rng>(&self.encode_ids(seq), None).cls
    }

    pub fn triple_logits(&self, cls: &[f64]) -> [f64; 2] {
        let mut z = [0.0; 2];
        self.triple_head.matvec(cls, &mut z);
        z
    }

    pub fn relation_logits(&self, cls: &[f64]) -> Vec<f64> {
        let mut z = vec![0.0; self.num_relations()];
        self.relation_head.matvec(cls, &mut z);
        z
    }

    pub fn classify_triple(&self, seq: &InputSequence) -> ScoreVector {
        let z = self.triple_logits(&self.encode(seq));
        ScoreVector::from_logits(z[0], z[1])
    }

    pub fn classify_relation(&self, seq: &InputSequence) -> RelationDistribution {
        RelationDistribution::from_logits(&self.relation_logits(&self.encode(seq)))
    }

    /// Loss of one sample given its forward pass; adds the gradient of that
    /// loss to `grads`.
    pub fn backward(
        &self,
        enc: &EncodedSequence,
        fwd: &Forward,
        target: Target,
        grads: &mut Gradients,
    ) -> f64 {
        let h = self.hidden_size();
        let mut dcls = vec![0.0; h];
        let loss = match target {
            Target::Triple(y) => {
                let z = self.triple_logits(&fwd.cls);
                let s = ScoreVector::from_logits(z[0], z[1]);
                let p = if y == 1 { s.p0 } else { s.p1 };
                let dz = triple_loss_logit_grad(z[0], z[1], y);
                grads.triple_head.add_outer(1.0, &dz, &fwd.cls);
                self.triple_head.matvec_t_add(&dz, &mut dcls);
                -p.max(PROB_EPS).ln()
            }
            Target::Relation(r) => {
                let z = self.relation_logits(&fwd.cls);
                let dz = relation_loss_logit_grad(&z, r);
                let p = dz[r.index()] + 1.0;
                grads.relation_head.add_outer(1.0, &dz, &fwd.cls);
                self.relation_head.matvec_t_add(&dz, &mut dcls);
                -p.max(PROB_EPS).ln()
            }
        };
        let dpre: Vec<f64> = dcls
            .iter()
            .zip(&fwd.cls)
            .map(|(d, c)| d * (1.0 - c * c))
            .collect();
        grads.hidden_weights.add_outer(1.0, &dpre, &fwd.pooled);
        crate::optim::axpy(1.0, &dpre, &mut grads.hidden_bias.data);
        let mut dpooled = vec![0.0; h];
        self.hidden_weights.matvec_t_add(&dpre, &mut dpooled);
        if let Some(mask) = &fwd.mask {
            dpooled.iter_mut().zip(mask).for_each(|(d, m)| *d *= m);
        }
        let inv = 1.0 / enc.tokens.len().max(1) as f64;
        for i in 0..enc.tokens.len() {
            grads.token.add_row(enc.tokens[i] as usize, inv, &dpooled);
            crate::optim::axpy(
                inv,
                &dpooled,
                grads.segment.row_mut(enc.segments[i] as usize),
            );
            grads
                .position
                .add_row(enc.positions[i] as usize, inv, &dpooled);
        }
        loss
    }

    /// Eval-mode loss of one sample.
    pub fn sample_loss(&self, enc: &EncodedSequence, target: Target) -> f64 {
        let cls = self.forward::<ChaCha8Rng>(enc, None).cls;
        match target {
            Target::Triple(y) => {
                let z = self.triple_logits(&cls);
                let s = ScoreVector::from_logits(z[0], z[1]);
                -(if y == 1 { s.p0 } else { s.p1 }).max(PROB_EPS).ln()
            }
            Target::Relation(r) => {
                let d = RelationDistribution::from_logits(&self.relation_logits(&cls));
                -d.probs[r.index()].max(PROB_EPS).ln()
            }
        }
    }

    fn is_finite(&self) -> bool {
        [
            &self.token_embeddings,
            &self.segment_embeddings,
            &self.position_embeddings,
            &self.hidden_weights,
            &self.hidden_bias,
            &self.triple_head,
            &self.relation_head,
        ]
        .iter()
        .all(|m| m.is_finite())
    }
}

impl Scorer for ClassifierState {
    /// `p0` of each triple.
    fn score_triples(&self, kg: &KnowledgeGraph, triples: &[Triple]) -> Result<Vec<f64>> {
        triples
            .iter()
            .map(|t| {
                Ok(self
                    .classify_triple(&textgen::triple_sequence(kg, t, self.max_len)?)
                    .p0)
            })
            .collect()
    }

    fn relation_scores(
        &self,
        kg: &KnowledgeGraph,
        head: EntityId,
        tail: EntityId,
    ) -> Result<Vec<f64>> {
        let seq = textgen::pair_sequence(kg, head, tail, self.max_len)?;
        Ok(self.classify_relation(&seq).probs)
    }

    fn decision_threshold(&self) -> Option<f64> {
        Some(0.5)
    }
}

struct Optimizer {
    adam: Adam,
    token: Moments,
    segment: Moments,
    position: Moments,
    hidden_weights: Moments,
    hidden_bias: Moments,
    triple_head: Moments,
    relation_head: Moments,
}

impl Optimizer {
    fn new(s: &ClassifierState, cfg: &TrainConfig) -> Self {
        Optimizer {
            adam: Adam::new(cfg.adam()),
            token: Moments::for_matrix(&s.token_embeddings),
            segment: Moments::for_matrix(&s.segment_embeddings),
            position: Moments::for_matrix(&s.position_embeddings),
            hidden_weights: Moments::for_matrix(&s.hidden_weights),
            hidden_bias: Moments::for_matrix(&s.hidden_bias),
            triple_head: Moments::for_matrix(&s.triple_head),
            relation_head: Moments::for_matrix(&s.relation_head),
        }
    }

    fn step(&mut self, s: &mut ClassifierState, g: &Gradients, task: Task) {
        let adam = &mut self.adam;
        adam.tick();
        adam.apply_sparse(&mut s.token_embeddings, &mut self.token, &g.token);
        adam.apply_dense(&mut s.segment_embeddings, &mut self.segment, &g.segment);
        adam.apply_sparse(&mut s.position_embeddings, &mut self.position, &g.position);
        adam.apply_dense(
            &mut s.hidden_weights,
            &mut self.hidden_weights,
            &g.hidden_weights,
        );
        adam.apply_dense(&mut s.hidden_bias, &mut self.hidden_bias, &g.hidden_bias);
        // Only the head of the task being trained receives updates.
        if task == Task::Rp {
            adam.apply_dense(
                &mut s.relation_head,
                &mut self.relation_head,
                &g.relation_head,
            );
        } else {
            adam.apply_dense(&mut s.triple_head, &mut self.triple_head, &g.triple_head);
        }
    }
}

fn triple_samples(
    state: &ClassifierState,
    kg: &KnowledgeGraph,
    corrupter: &Corrupter<'_>,
    positives: &[Triple],
    ratio: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(EncodedSequence, Target)>> {
    corrupter
        .negative_batch(positives, ratio, rng)?
        .into_iter()
        .map(|l| {
            let seq = textgen::triple_sequence(kg, &l.triple, state.max_len)?;
            Ok((state.encode_ids(&seq), Target::Triple(l.label)))
        })
        .collect()
}

pub(crate) fn train(bundle: &DatasetBundle, task: Task, cfg: &TrainConfig) -> Result<Trained> {
    let kg = &bundle.graph;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let vocab = Vocabulary::from_triples(kg, &bundle.train)?;
    let mut state = ClassifierState::init(
        vocab,
        kg.num_relations(),
        cfg.hidden_size,
        cfg.max_len,
        cfg.dropout,
        &mut rng,
    );

    let train_only;
    let known = match cfg.negative_filter {
        NegativeFilter::AllSplits => bundle.full_positives(),
        NegativeFilter::TrainOnly => {
            train_only = bundle.train_positives();
            &train_only
        }
    };
    let corrupter = Corrupter::new(kg.num_entities(), known);

    let mut samples = match task {
        Task::Rp => bundle
            .train
            .iter()
            .map(|t| {
                let seq = textgen::pair_sequence(kg, t.head, t.tail, state.max_len)?;
                Ok((state.encode_ids(&seq), Target::Relation(t.relation)))
            })
            .collect::<Result<Vec<_>>>()?,
        Task::Tc | Task::Lp => triple_samples(
            &state,
            kg,
            &corrupter,
            &bundle.train,
            cfg.negative_ratio,
            &mut rng,
        )?,
    };
    let initial_loss: f64 = samples
        .iter()
        .map(|(enc, target)| state.sample_loss(enc, *target))
        .sum();

    let mut opt = Optimizer::new(&state, cfg);
    let mut grads = Gradients::zeros_like(&state);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        if epoch > 0 && cfg.resample_negatives && task != Task::Rp {
            samples = triple_samples(
                &state,
                kg,
                &corrupter,
                &bundle.train,
                cfg.negative_ratio,
                &mut rng,
            )?;
        }
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            grads.clear();
            let mut batch_loss = 0.0;
            for &i in batch {
                let (enc, target) = &samples[i];
                let fwd = state.forward(enc, Some(&mut rng));
                batch_loss += state.backward(enc, &fwd, *target, &mut grads);
            }
            if !batch_loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    loss: batch_loss,
                });
            }
            epoch_loss += batch_loss;
            opt.step(&mut state, &grads, task);
            step += 1;
        }
        if !state.is_finite() {
            return Err(Error::Diverged {
                epoch,
                step,
                loss: f64::NAN,
            });
        }
        epoch_losses.push(epoch_loss);
    }
    Ok(Trained {
        model: Model::Classifier(state),
        initial_loss,
        epoch_losses,
    })
}
