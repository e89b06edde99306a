#![allow(dead_code)]

use std::path::PathBuf;

use kgc_core::eval::TieRule;
use kgc_core::ingest::{load_dataset, Auxiliary, LiteralMap, LoadOptions, RawTriple};
use kgc_core::optim::Matrix;
use kgc_core::scorers::embedding::{EmbeddingModel, EmbeddingState, Norm};
use kgc_core::scorers::EmbeddingLoss;
use kgc_core::{DatasetBundle, EntityId, KnowledgeGraph, Result, Scorer, Side, Triple, TripleSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn umls_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/umls")
}

pub fn load_umls() -> DatasetBundle {
    load_dataset(umls_dir(), &LoadOptions::default()).expect("UMLS data present under data/umls")
}

/// Random graph with at most `max_entities` entities, `max_relations`
/// relations and `max_triples` distinct triples, split 70/15/15.
pub fn random_bundle(
    seed: u64,
    max_entities: usize,
    max_relations: usize,
    max_triples: usize,
) -> DatasetBundle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ne = rng.random_range(3..=max_entities);
    let nr = rng.random_range(1..=max_relations);
    let target = rng.random_range(3..=max_triples);
    let mut seen = std::collections::HashSet::new();
    let mut raw: Vec<RawTriple> = Vec::new();
    for _ in 0..target * 4 {
        if raw.len() == target {
            break;
        }
        let (h, r, t) = (
            rng.random_range(0..ne),
            rng.random_range(0..nr),
            rng.random_range(0..ne),
        );
        if seen.insert((h, r, t)) {
            raw.push((format!("e{h}"), format!("r{r}"), format!("e{t}")));
        }
    }
    let n = raw.len();
    let (a, b) = ((n * 70 / 100).max(1), (n * 85 / 100).max(2));
    DatasetBundle::from_splits(
        &raw[..a],
        &raw[a..b],
        &raw[b..],
        &Auxiliary::default(),
        LiteralMap::default(),
    )
    .unwrap()
}

/// Random embedding state over the bundle's graph.
pub fn random_state(
    kg: &KnowledgeGraph,
    model: EmbeddingModel,
    dim: usize,
    seed: u64,
) -> EmbeddingState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    EmbeddingState {
        model,
        entity_vectors: Matrix::uniform(kg.num_entities(), dim, 1.0, &mut rng),
        relation_vectors: Matrix::uniform(kg.num_relations().max(1), dim, 1.0, &mut rng),
        norm: Norm::L2,
        margin: 1.0,
        loss: EmbeddingLoss::Margin,
    }
}

/// Rounds another scorer's output to a coarse grid so that ties occur.
pub struct Coarse<S>(pub S, pub f64);

impl<S: Scorer> Scorer for Coarse<S> {
    fn score_triples(&self, kg: &KnowledgeGraph, triples: &[Triple]) -> Result<Vec<f64>> {
        Ok(self
            .0
            .score_triples(kg, triples)?
            .into_iter()
            .map(|s| (s / self.1).round())
            .collect())
    }
}

/// Applies a strictly increasing map to another scorer's output.
pub struct Monotone<S, F>(pub S, pub F);

impl<S: Scorer, F: Fn(f64) -> f64 + Sync> Scorer for Monotone<S, F> {
    fn score_triples(&self, kg: &KnowledgeGraph, triples: &[Triple]) -> Result<Vec<f64>> {
        Ok(self
            .0
            .score_triples(kg, triples)?
            .into_iter()
            .map(&self.1)
            .collect())
    }
}

/// Rank by sorting: the true triple's block of equal scores in a
/// descending sort spans positions `first..=last` (1-based).
fn sorted_rank(true_score: f64, mut all: Vec<f64>, tie: TieRule) -> f64 {
    all.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let first = all.iter().position(|&s| s == true_score).unwrap() + 1;
    let last = all.iter().rposition(|&s| s == true_score).unwrap() + 1;
    match tie {
        TieRule::Optimistic => first as f64,
        TieRule::Pessimistic => last as f64,
        TieRule::Mean => (first + last) as f64 / 2.0,
    }
}

/// Enumerate-score-sort reference for filtered link prediction; scores
/// every triple individually.
pub fn oracle_link_rank(
    scorer: &dyn Scorer,
    kg: &KnowledgeGraph,
    t: &Triple,
    side: Side,
    filter: &TripleSet,
    tie: TieRule,
) -> f64 {
    let score = |x: &Triple| scorer.score_triples(kg, std::slice::from_ref(x)).unwrap()[0];
    let mut all = vec![score(t)];
    for e in 0..kg.num_entities() as u32 {
        let e = EntityId(e);
        if e == t.head || e == t.tail {
            continue;
        }
        let c = if side == Side::Head {
            Triple { head: e, ..*t }
        } else {
            Triple { tail: e, ..*t }
        };
        if !filter.contains(&c) {
            all.push(score(&c));
        }
    }
    sorted_rank(all[0], all, tie)
}

pub fn oracle_relation_rank(
    scorer: &dyn Scorer,
    kg: &KnowledgeGraph,
    t: &Triple,
    filter: &TripleSet,
    tie: TieRule,
) -> f64 {
    let scores = scorer.relation_scores(kg, t.head, t.tail).unwrap();
    let mut all = vec![scores[t.relation.index()]];
    for (r, &s) in scores.iter().enumerate() {
        let c = Triple {
            relation: kgc_core::RelationId(r as u32),
            ..*t
        };
        if r != t.relation.index() && !filter.contains(&c) {
            all.push(s);
        }
    }
    sorted_rank(all[0], all, tie)
}

/// |a - n| / max(|a|, |n|, 1e-6).
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

pub const FD_STEP: f64 = 1e-5;

/// Central-difference gradient of `f` at `x`.
pub fn numeric_grad(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + FD_STEP;
            let up = f(&x);
            x[i] = orig - FD_STEP;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| rel_err(*a, *n))
        .fold(0.0, f64::max)
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}
