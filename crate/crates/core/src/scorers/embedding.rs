//! TransE and DistMult embedding baselines.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    EmbeddingLoss, Model, NegativeFilter, ScoreVector, Scorer, ScorerKind, TrainConfig, Trained,
};
use crate::error::{Error, Result};
use crate::graph::{KnowledgeGraph, Triple};
use crate::ingest::DatasetBundle;
use crate::optim::{l2_norm, Adam, Matrix, Moments, SparseGrad};
use crate::sampling::Corrupter;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    L1,
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingModel {
    Transe,
    Distmult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingState {
    pub model: EmbeddingModel,
    pub entity_vectors: Matrix,
    pub relation_vectors: Matrix,
    pub norm: Norm,
    pub margin: f64,
    pub loss: EmbeddingLoss,
}

impl EmbeddingState {
    pub fn dim(&self) -> usize {
        self.entity_vectors.cols
    }

    fn vectors(&self, t: &Triple) -> (&[f64], &[f64], &[f64]) {
        (
            self.entity_vectors.row(t.head.index()),
            self.relation_vectors.row(t.relation.index()),
            self.entity_vectors.row(t.tail.index()),
        )
    }

    pub fn score(&self, t: &Triple) -> f64 {
        match self.model {
            EmbeddingModel::Transe => transe_score(self, t),
            EmbeddingModel::Distmult => distmult_score(self, t),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.entity_vectors.is_finite() && self.relation_vectors.is_finite()
    }
}

/// `-||h + r - t||` under the state's norm.
pub fn transe_score(state: &EmbeddingState, t: &Triple) -> f64 {
    let (h, r, tl) = state.vectors(t);
    transe_score_vec(h, r, tl, state.norm)
}

/// `sum_k h_k r_k t_k`
pub fn distmult_score(state: &EmbeddingState, t: &Triple) -> f64 {
    let (h, r, tl) = state.vectors(t);
    distmult_score_vec(h, r, tl)
}

pub fn transe_score_vec(h: &[f64], r: &[f64], t: &[f64], norm: Norm) -> f64 {
    let diffs = h.iter().zip(r).zip(t).map(|((h, r), t)| h + r - t);
    match norm {
        Norm::L1 => -diffs.map(f64::abs).sum::<f64>(),
        Norm::L2 => -diffs.map(|d| d * d).sum::<f64>().sqrt(),
    }
}

/// Score and its gradient with respect to `h` (equal to the gradient with
/// respect to `r`, and the negation of the one with respect to `t`).
pub fn transe_score_grad(h: &[f64], r: &[f64], t: &[f64], norm: Norm) -> (f64, Vec<f64>) {
    let d: Vec<f64> = h
        .iter()
        .zip(r)
        .zip(t)
        .map(|((h, r), t)| h + r - t)
        .collect();
    match norm {
        Norm::L1 => (
            -d.iter().map(|x| x.abs()).sum::<f64>(),
            d.iter()
                .map(|x| -x.signum() * f64::from(*x != 0.0))
                .collect(),
        ),
        Norm::L2 => {
            let n = l2_norm(&d);
            let g = if n > 0.0 {
                d.iter().map(|x| -x / n).collect()
            } else {
                vec![0.0; d.len()]
            };
            (-n, g)
        }
    }
}

pub fn distmult_score_vec(h: &[f64], r: &[f64], t: &[f64]) -> f64 {
    h.iter().zip(r).zip(t).map(|((h, r), t)| h * r * t).sum()
}

/// Score and gradients with respect to `h`, `r` and `t`.
pub fn distmult_score_grad(h: &[f64], r: &[f64], t: &[f64]) -> (f64, [Vec<f64>; 3]) {
    let gh = r.iter().zip(t).map(|(r, t)| r * t).collect();
    let gr = h.iter().zip(t).map(|(h, t)| h * t).collect();
    let gt = h.iter().zip(r).map(|(h, r)| h * r).collect();
    (distmult_score_vec(h, r, t), [gh, gr, gt])
}

/// `max(0, margin + negative - positive)`
pub fn margin_loss(positive: f64, negative: f64, margin: f64) -> f64 {
    (margin + negative - positive).max(0.0)
}

/// TransE margin loss for one (positive, negative) pair and its gradients
/// with respect to `[h+, r+, t+, h-, r-, t-]`.
pub fn transe_margin_loss_grad(
    pos: [&[f64]; 3],
    neg: [&[f64]; 3],
    margin: f64,
    norm: Norm,
) -> (f64, [Vec<f64>; 6]) {
    let (sp, gp) = transe_score_grad(pos[0], pos[1], pos[2], norm);
    let (sn, gn) = transe_score_grad(neg[0], neg[1], neg[2], norm);
    let loss = margin_loss(sp, sn, margin);
    let zero = vec![0.0; gp.len()];
    if loss <= 0.0 {
        return (0.0, std::array::from_fn(|_| zero.clone()));
    }
    let neg_of = |g: &[f64]| g.iter().map(|x| -x).collect::<Vec<f64>>();
    (
        loss,
        [
            neg_of(&gp),
            neg_of(&gp),
            gp.clone(),
            gn.clone(),
            gn.clone(),
            neg_of(&gn),
        ],
    )
}

impl Scorer for EmbeddingState {
    fn score_triples(&self, _kg: &KnowledgeGraph, triples: &[Triple]) -> Result<Vec<f64>> {
        Ok(triples.iter().map(|t| self.score(t)).collect())
    }

    fn decision_threshold(&self) -> Option<f64> {
        // sigmoid(score) >= 0.5
        (self.loss == EmbeddingLoss::CrossEntropy).then_some(0.0)
    }
}

fn normalize_row(m: &mut Matrix, i: usize) {
    let row = m.row_mut(i);
    let n = l2_norm(row);
    if n > 0.0 {
        row.iter_mut().for_each(|x| *x /= n);
    }
}

pub fn init_state(
    model: EmbeddingModel,
    kg: &KnowledgeGraph,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> EmbeddingState {
    let d = cfg.embedding_dim;
    let bound = 6.0 / (d as f64).sqrt();
    let mut entity_vectors = Matrix::uniform(kg.num_entities(), d, bound, rng);
    let mut relation_vectors = Matrix::uniform(kg.num_relations(), d, bound, rng);
    if model == EmbeddingModel::Transe {
        (0..relation_vectors.rows).for_each(|i| normalize_row(&mut relation_vectors, i));
        (0..entity_vectors.rows).for_each(|i| normalize_row(&mut entity_vectors, i));
    } else {
        entity_vectors.data.iter_mut().for_each(|x| *x /= 6.0);
        relation_vectors.data.iter_mut().for_each(|x| *x /= 6.0);
    }
    EmbeddingState {
        model,
        entity_vectors,
        relation_vectors,
        norm: cfg.norm,
        margin: cfg.margin,
        loss: match model {
            EmbeddingModel::Transe => EmbeddingLoss::Margin,
            EmbeddingModel::Distmult => cfg.embedding_loss,
        },
    }
}

struct Grads {
    entity: SparseGrad,
    relation: SparseGrad,
}

impl Grads {
    fn add(&mut self, t: &Triple, g: [&[f64]; 3], scale: f64) {
        self.entity.add_row(t.head.index(), scale, g[0]);
        self.relation.add_row(t.relation.index(), scale, g[1]);
        self.entity.add_row(t.tail.index(), scale, g[2]);
    }
}

/// Loss of one positive with its negatives; accumulates gradients when
/// `grads` is given.
fn group_loss(
    state: &EmbeddingState,
    pos: &Triple,
    negs: &[Triple],
    weight_decay: f64,
    mut grads: Option<&mut Grads>,
) -> f64 {
    let mut loss = 0.0;
    match state.loss {
        EmbeddingLoss::Margin => {
            for n in negs {
                let (p, q) = (state.vectors(pos), state.vectors(n));
                let (l, g) = match state.model {
                    EmbeddingModel::Transe => transe_margin_loss_grad(
                        [p.0, p.1, p.2],
                        [q.0, q.1, q.2],
                        state.margin,
                        state.norm,
                    ),
                    EmbeddingModel::Distmult => {
                        let (sp, gp) = distmult_score_grad(p.0, p.1, p.2);
                        let (sn, gn) = distmult_score_grad(q.0, q.1, q.2);
                        let l = margin_loss(sp, sn, state.margin);
                        let [a, b, c] = gp;
                        let [d, e, f] = gn;
                        let on = f64::from(l > 0.0);
                        let scale = |v: Vec<f64>, s: f64| v.into_iter().map(|x| x * s).collect();
                        (
                            l,
                            [
                                scale(a, -on),
                                scale(b, -on),
                                scale(c, -on),
                                scale(d, on),
                                scale(e, on),
                                scale(f, on),
                            ],
                        )
                    }
                };
                loss += l;
                if l > 0.0 {
                    if let Some(g_acc) = grads.as_deref_mut() {
                        g_acc.add(pos, [&g[0], &g[1], &g[2]], 1.0);
                        g_acc.add(n, [&g[3], &g[4], &g[5]], 1.0);
                    }
                }
            }
        }
        EmbeddingLoss::CrossEntropy => {
            let labeled = std::iter::once((pos, 1u8)).chain(negs.iter().map(|n| (n, 0u8)));
            for (t, y) in labeled {
                let (h, r, tl) = state.vectors(t);
                let (s, g) = match state.model {
                    EmbeddingModel::Distmult => distmult_score_grad(h, r, tl),
                    EmbeddingModel::Transe => {
                        let (s, g) = transe_score_grad(h, r, tl, state.norm);
                        let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                        (s, [g.clone(), g, neg])
                    }
                };
                let sv = ScoreVector::from_logits(s, 0.0);
                let p = if y == 1 { sv.p0 } else { sv.p1 };
                loss -= p.max(super::PROB_EPS).ln();
                if let Some(g_acc) = grads.as_deref_mut() {
                    let ds = sv.p0 - f64::from(y);
                    g_acc.add(t, [&g[0], &g[1], &g[2]], ds);
                }
            }
        }
    }
    if weight_decay > 0.0 {
        for t in std::iter::once(pos).chain(negs) {
            let (h, r, tl) = state.vectors(t);
            loss += weight_decay * (dot_self(h) + dot_self(r) + dot_self(tl));
            if let Some(g_acc) = grads.as_deref_mut() {
                g_acc.add(t, [h, r, tl], 2.0 * weight_decay);
            }
        }
    }
    loss
}

fn dot_self(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

pub(crate) fn train(
    kind: ScorerKind,
    bundle: &DatasetBundle,
    cfg: &TrainConfig,
) -> Result<Trained> {
    let model = match kind {
        ScorerKind::Transe => EmbeddingModel::Transe,
        _ => EmbeddingModel::Distmult,
    };
    let kg = &bundle.graph;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = init_state(model, kg, cfg, &mut rng);

    let train_only;
    let known = match cfg.negative_filter {
        NegativeFilter::AllSplits => bundle.full_positives(),
        NegativeFilter::TrainOnly => {
            train_only = bundle.train_positives();
            &train_only
        }
    };
    let corrupter = Corrupter::new(kg.num_entities(), known);
    let ratio = cfg.negative_ratio;
    let sample_negatives = |rng: &mut ChaCha8Rng| -> Result<Vec<Triple>> {
        let batch = corrupter.negative_batch(&bundle.train, ratio, rng)?;
        Ok(batch
            .into_iter()
            .filter(|l| l.label == 0)
            .map(|l| l.triple)
            .collect())
    };

    let mut adam = Adam::new(cfg.adam());
    let mut ent_m = Moments::for_matrix(&state.entity_vectors);
    let mut rel_m = Moments::for_matrix(&state.relation_vectors);
    let mut grads = Grads {
        entity: SparseGrad::new(state.dim()),
        relation: SparseGrad::new(state.dim()),
    };

    let mut negatives = sample_negatives(&mut rng)?;
    let initial_loss: f64 = bundle
        .train
        .iter()
        .enumerate()
        .map(|(i, p)| {
            group_loss(
                &state,
                p,
                &negatives[i * ratio..(i + 1) * ratio],
                cfg.weight_decay,
                None,
            )
        })
        .sum();
    let mut order: Vec<usize> = (0..bundle.train.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        if epoch > 0 && cfg.resample_negatives {
            negatives = sample_negatives(&mut rng)?;
        }
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            grads.entity.clear();
            grads.relation.clear();
            let mut batch_loss = 0.0;
            for &i in batch {
                let negs = &negatives[i * ratio..(i + 1) * ratio];
                batch_loss += group_loss(
                    &state,
                    &bundle.train[i],
                    negs,
                    cfg.weight_decay,
                    Some(&mut grads),
                );
            }
            if !batch_loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    loss: batch_loss,
                });
            }
            epoch_loss += batch_loss;
            adam.tick();
            adam.apply_sparse(&mut state.entity_vectors, &mut ent_m, &grads.entity);
            adam.apply_sparse(&mut state.relation_vectors, &mut rel_m, &grads.relation);
            if model == EmbeddingModel::Transe {
                for e in grads.entity.touched() {
                    normalize_row(&mut state.entity_vectors, e);
                }
            }
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
    let model = match model {
        EmbeddingModel::Transe => Model::Transe(state),
        EmbeddingModel::Distmult => Model::Distmult(state),
    };
    Ok(Trained {
        model,
        initial_loss,
        epoch_losses,
    })
}
