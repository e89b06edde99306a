//! Filtered evaluation for link prediction, relation prediction and triple
//! classification, plus per-relation and per-cardinality breakdowns.
//!
//! Link prediction replaces the head (or tail) of a test triple with every
//! entity other than its own head and tail; relation prediction replaces
//! the relation with every other relation. Corruptions found in the filter
//! set (normally all train/dev/test positives) are dropped before ranking.
//! Ranks depend only on the order of scores, never on their values.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{
    cardinality_table, Cardinality, EntityId, KnowledgeGraph, RelationCardinality, RelationId,
    Side, Triple, TripleSet,
};
use crate::ingest::DatasetBundle;
use crate::sampling::{Corrupter, LabeledTriple};
use crate::scorers::Scorer;

/// How candidates scoring exactly like the true triple are counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TieRule {
    /// Average of the optimistic and pessimistic rank.
    #[default]
    Mean,
    /// Ties rank below the true triple.
    Optimistic,
    /// Ties rank above the true triple.
    Pessimistic,
}

impl std::str::FromStr for TieRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<TieRule> {
        match s {
            "mean" => Ok(TieRule::Mean),
            "optimistic" => Ok(TieRule::Optimistic),
            "pessimistic" => Ok(TieRule::Pessimistic),
            _ => Err(Error::Unknown {
                kind: "tie rule",
                name: s.to_owned(),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankResult {
    pub triple: Triple,
    pub side: Side,
    /// 1-based; fractional under [`TieRule::Mean`].
    pub rank: f64,
    /// The true triple plus every unfiltered corruption.
    pub candidates_considered: usize,
}

/// Rank of `true_score` among itself and `others` (descending order).
pub fn rank_of(true_score: f64, others: impl IntoIterator<Item = f64>, tie: TieRule) -> f64 {
    let (mut higher, mut equal) = (0usize, 0usize);
    for s in others {
        match s.partial_cmp(&true_score) {
            Some(Ordering::Greater) => higher += 1,
            Some(Ordering::Equal) => equal += 1,
            _ => {}
        }
    }
    let base = 1.0 + higher as f64;
    match tie {
        TieRule::Mean => base + equal as f64 / 2.0,
        TieRule::Optimistic => base,
        TieRule::Pessimistic => base + equal as f64,
    }
}

/// Unfiltered link-prediction candidates for `t` on `side`.
pub fn link_candidates(
    kg: &KnowledgeGraph,
    t: &Triple,
    side: Side,
    filter: &TripleSet,
) -> Vec<Triple> {
    kg.entity_ids()
        .filter(|&e| e != t.head && e != t.tail)
        .map(|e| match side {
            Side::Head => Triple { head: e, ..*t },
            _ => Triple { tail: e, ..*t },
        })
        .filter(|c| !filter.contains(c))
        .collect()
}

pub fn rank_link(
    scorer: &dyn Scorer,
    kg: &KnowledgeGraph,
    t: &Triple,
    side: Side,
    filter: &TripleSet,
    tie: TieRule,
) -> Result<RankResult> {
    if side == Side::Relation {
        return Err(Error::Unsupported("relation side in link prediction"));
    }
    let mut batch = Vec::with_capacity(kg.num_entities());
    batch.push(*t);
    batch.extend(link_candidates(kg, t, side, filter));
    let scores = scorer.score_triples(kg, &batch)?;
    Ok(RankResult {
        triple: *t,
        side,
        rank: rank_of(scores[0], scores[1..].iter().copied(), tie),
        candidates_considered: batch.len(),
    })
}

pub fn rank_relation(
    scorer: &dyn Scorer,
    kg: &KnowledgeGraph,
    t: &Triple,
    filter: &TripleSet,
    tie: TieRule,
) -> Result<RankResult> {
    let scores = scorer.relation_scores(kg, t.head, t.tail)?;
    if scores.len() != kg.num_relations() {
        return Err(Error::LengthMismatch {
            left: scores.len(),
            right: kg.num_relations(),
        });
    }
    let others: Vec<f64> = kg
        .relation_ids()
        .filter(|&r| r != t.relation && !filter.contains(&Triple { relation: r, ..*t }))
        .map(|r| scores[r.index()])
        .collect();
    Ok(RankResult {
        triple: *t,
        side: Side::Relation,
        rank: rank_of(scores[t.relation.index()], others.iter().copied(), tie),
        candidates_considered: others.len() + 1,
    })
}

/// Head and tail ranks of every test triple, in `(t0 head, t0 tail, t1
/// head, ...)` order regardless of how the work is scheduled.
pub fn rank_link_all(
    scorer: &dyn Scorer,
    kg: &KnowledgeGraph,
    tests: &[Triple],
    filter: &TripleSet,
    tie: TieRule,
) -> Result<Vec<RankResult>> {
    let pairs: Vec<[RankResult; 2]> = tests
        .par_iter()
        .map(|t| {
            Ok([
                rank_link(scorer, kg, t, Side::Head, filter, tie)?,
                rank_link(scorer, kg, t, Side::Tail, filter, tie)?,
            ])
        })
        .collect::<Result<_>>()?;
    Ok(pairs.into_iter().flatten().collect())
}

pub fn rank_relation_all(
    scorer: &dyn Scorer,
    kg: &KnowledgeGraph,
    tests: &[Triple],
    filter: &TripleSet,
    tie: TieRule,
) -> Result<Vec<RankResult>> {
    tests
        .par_iter()
        .map(|t| rank_relation(scorer, kg, t, filter, tie))
        .collect()
}

pub const DEFAULT_HITS: [usize; 4] = [1, 3, 5, 10];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub count: usize,
    pub mr: f64,
    pub mrr: f64,
    pub hits: BTreeMap<usize, f64>,
}

impl Metrics {
    pub fn from_ranks(ranks: &[f64], ns: &[usize]) -> Result<Metrics> {
        if ranks.is_empty() {
            return Err(Error::EmptyRanks);
        }
        let n = ranks.len() as f64;
        Ok(Metrics {
            count: ranks.len(),
            mr: ranks.iter().sum::<f64>() / n,
            mrr: ranks.iter().map(|r| 1.0 / r).sum::<f64>() / n,
            hits: ns
                .iter()
                .map(|&k| {
                    (
                        k,
                        ranks.iter().filter(|&&r| r <= k as f64).count() as f64 / n,
                    )
                })
                .collect(),
        })
    }

    pub fn hits_at(&self, n: usize) -> Option<f64> {
        self.hits.get(&n).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CardinalityCell {
    pub category: Cardinality,
    pub side: Side,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationSummary {
    pub relation: String,
    pub support: usize,
    pub hits_at_10: f64,
    pub mrr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Extremes {
    pub best: Vec<RelationSummary>,
    pub worst: Vec<RelationSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub scorer: String,
    pub count: usize,
    pub mr: Option<f64>,
    pub mrr: Option<f64>,
    pub hits: BTreeMap<usize, f64>,
    pub accuracy: Option<f64>,
    pub per_side: BTreeMap<Side, Metrics>,
    pub per_relation: BTreeMap<String, Metrics>,
    pub per_cardinality: Vec<CardinalityCell>,
    pub extremes: Option<Extremes>,
    pub tie_rule: Option<TieRule>,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub notes: Vec<String>,
}

impl EvalReport {
    pub fn empty(task: &str, scorer: &str) -> Self {
        EvalReport {
            task: task.to_owned(),
            scorer: scorer.to_owned(),
            count: 0,
            mr: None,
            mrr: None,
            hits: BTreeMap::new(),
            accuracy: None,
            per_side: BTreeMap::new(),
            per_relation: BTreeMap::new(),
            per_cardinality: Vec::new(),
            extremes: None,
            tie_rule: None,
            config: serde_json::Value::Null,
            seed: None,
            notes: Vec::new(),
        }
    }

    /// Checks MR >= 1, MRR in (0, 1] and Hits@N non-decreasing in N.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        let all = std::iter::once(self.mr.zip(self.mrr).map(|(mr, mrr)| (mr, mrr, &self.hits)))
            .flatten()
            .chain(self.per_side.values().map(|m| (m.mr, m.mrr, &m.hits)))
            .chain(self.per_relation.values().map(|m| (m.mr, m.mrr, &m.hits)));
        for (mr, mrr, hits) in all {
            if mr < 1.0 {
                return Err(format!("MR {mr} < 1"));
            }
            if !(mrr > 0.0 && mrr <= 1.0) {
                return Err(format!("MRR {mrr} outside (0, 1]"));
            }
            let values: Vec<f64> = hits.values().copied().collect();
            if values.windows(2).any(|w| w[1] < w[0]) {
                return Err(format!("Hits@N not monotone: {hits:?}"));
            }
        }
        Ok(())
    }
}

/// MR, MRR and Hits@N over all ranks, by side and by relation.
pub fn aggregate(ranks: &[RankResult], ns: &[usize], kg: &KnowledgeGraph) -> Result<EvalReport> {
    let all: Vec<f64> = ranks.iter().map(|r| r.rank).collect();
    let overall = Metrics::from_ranks(&all, ns)?;

    let mut by_side: BTreeMap<Side, Vec<f64>> = BTreeMap::new();
    let mut by_relation: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in ranks {
        by_side.entry(r.side).or_default().push(r.rank);
        by_relation
            .entry(kg.relation_name(r.triple.relation).to_owned())
            .or_default()
            .push(r.rank);
    }
    let task = if ranks.iter().all(|r| r.side == Side::Relation) {
        "rp"
    } else {
        "lp"
    };
    let mut report = EvalReport::empty(task, "");
    report.count = overall.count;
    report.mr = Some(overall.mr);
    report.mrr = Some(overall.mrr);
    report.hits = overall.hits;
    report.per_side = by_side
        .into_iter()
        .map(|(s, v)| Ok((s, Metrics::from_ranks(&v, ns)?)))
        .collect::<Result<_>>()?;
    report.per_relation = by_relation
        .into_iter()
        .map(|(r, v)| Ok((r, Metrics::from_ranks(&v, ns)?)))
        .collect::<Result<_>>()?;
    Ok(report)
}

/// Rule turning a triple score into a plausible / implausible decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum DecisionRule {
    /// Plausible iff `score >= threshold`.
    Global { threshold: f64 },
    /// Per-relation thresholds with a global fallback.
    PerRelation {
        thresholds: BTreeMap<u32, f64>,
        fallback: f64,
    },
}

impl DecisionRule {
    pub fn is_positive(&self, t: &Triple, score: f64) -> bool {
        match self {
            DecisionRule::Global { threshold } => score >= *threshold,
            DecisionRule::PerRelation {
                thresholds,
                fallback,
            } => score >= *thresholds.get(&t.relation.0).unwrap_or(fallback),
        }
    }

    /// Accuracy-maximizing global threshold on labeled scores.
    pub fn tune_global(scores: &[f64], labels: &[u8]) -> DecisionRule {
        DecisionRule::Global {
            threshold: best_threshold(scores, labels),
        }
    }

    pub fn tune_per_relation(triples: &[LabeledTriple], scores: &[f64]) -> DecisionRule {
        let labels: Vec<u8> = triples.iter().map(|l| l.label).collect();
        let fallback = best_threshold(scores, &labels);
        let mut groups: BTreeMap<u32, (Vec<f64>, Vec<u8>)> = BTreeMap::new();
        for (l, &s) in triples.iter().zip(scores) {
            let g = groups.entry(l.triple.relation.0).or_default();
            g.0.push(s);
            g.1.push(l.label);
        }
        DecisionRule::PerRelation {
            thresholds: groups
                .into_iter()
                .map(|(r, (s, y))| (r, best_threshold(&s, &y)))
                .collect(),
            fallback,
        }
    }
}

/// Threshold maximizing accuracy of `score >= threshold`, chosen as the
/// midpoint between consecutive distinct scores. Ties in accuracy keep the
/// lowest threshold.
pub fn best_threshold(scores: &[f64], labels: &[u8]) -> f64 {
    let mut pairs: Vec<(f64, u8)> = scores.iter().copied().zip(labels.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    if pairs.is_empty() {
        return 0.0;
    }
    // Threshold below everything: all predicted positive.
    let mut correct = pairs.iter().filter(|p| p.1 == 1).count() as i64;
    let (mut best, mut best_threshold) = (correct, pairs[0].0 - 1.0);
    let mut i = 0;
    while i < pairs.len() {
        let value = pairs[i].0;
        while i < pairs.len() && pairs[i].0 == value {
            correct += if pairs[i].1 == 1 { -1 } else { 1 };
            i += 1;
        }
        if correct > best {
            best = correct;
            best_threshold = if i < pairs.len() {
                (value + pairs[i].0) / 2.0
            } else {
                value + 1.0
            };
        }
    }
    best_threshold
}

/// Fraction of labeled triples whose decision matches their label.
pub fn classification_accuracy(
    scorer: &dyn Scorer,
    kg: &KnowledgeGraph,
    labeled: &[LabeledTriple],
    rule: &DecisionRule,
) -> Result<f64> {
    if labeled.is_empty() {
        return Err(Error::EmptyLabeledSet);
    }
    let triples: Vec<Triple> = labeled.iter().map(|l| l.triple).collect();
    let scores = score_chunked(scorer, kg, &triples)?;
    Ok(accuracy_from_scores(labeled, &scores, rule))
}

pub fn accuracy_from_scores(labeled: &[LabeledTriple], scores: &[f64], rule: &DecisionRule) -> f64 {
    let correct = labeled
        .iter()
        .zip(scores)
        .filter(|(l, &s)| rule.is_positive(&l.triple, s) == (l.label == 1))
        .count();
    correct as f64 / labeled.len() as f64
}

/// Scores `triples` in parallel chunks, preserving order.
pub fn score_chunked(
    scorer: &dyn Scorer,
    kg: &KnowledgeGraph,
    triples: &[Triple],
) -> Result<Vec<f64>> {
    let chunks: Vec<Vec<f64>> = triples
        .par_chunks(256)
        .map(|c| scorer.score_triples(kg, c))
        .collect::<Result<_>>()?;
    Ok(chunks.concat())
}

/// Link-prediction metrics per (cardinality category, side). Relations
/// without a category and empty cells are left out.
pub fn ablate_cardinality(
    ranks: &[RankResult],
    cardinalities: &[Option<RelationCardinality>],
    ns: &[usize],
) -> Result<Vec<CardinalityCell>> {
    let mut cells: BTreeMap<(Cardinality, Side), Vec<f64>> = BTreeMap::new();
    for r in ranks {
        if let Some(Some(c)) = cardinalities.get(r.triple.relation.index()) {
            cells.entry((c.category, r.side)).or_default().push(r.rank);
        }
    }
    cells
        .into_iter()
        .map(|((category, side), v)| {
            Ok(CardinalityCell {
                category,
                side,
                metrics: Metrics::from_ranks(&v, ns)?,
            })
        })
        .collect()
}

/// The `k` best and `k` worst relations by Hits@10 among relations with at
/// least `min_support` distinct test triples. Ties go to the higher MRR,
/// then to the lexicographically smaller label.
pub fn per_relation_extremes(
    ranks: &[RankResult],
    kg: &KnowledgeGraph,
    k: usize,
    min_support: usize,
) -> Extremes {
    let mut groups: BTreeMap<RelationId, (HashSet<Triple>, Vec<f64>)> = BTreeMap::new();
    for r in ranks {
        let g = groups.entry(r.triple.relation).or_default();
        g.0.insert(r.triple);
        g.1.push(r.rank);
    }
    let summaries: Vec<RelationSummary> = groups
        .into_iter()
        .filter(|(_, (triples, _))| triples.len() >= min_support)
        .map(|(rel, (triples, ranks))| {
            let m = Metrics::from_ranks(&ranks, &[10]).expect("non-empty group");
            RelationSummary {
                relation: kg.relation_label(rel).to_owned(),
                support: triples.len(),
                hits_at_10: m.hits[&10],
                mrr: m.mrr,
            }
        })
        .collect();
    let tie_break = |a: &RelationSummary, b: &RelationSummary| {
        b.mrr
            .total_cmp(&a.mrr)
            .then_with(|| a.relation.cmp(&b.relation))
    };
    let mut best = summaries.clone();
    best.sort_by(|a, b| {
        b.hits_at_10
            .total_cmp(&a.hits_at_10)
            .then_with(|| tie_break(a, b))
    });
    best.truncate(k);
    let mut worst = summaries;
    worst.sort_by(|a, b| {
        a.hits_at_10
            .total_cmp(&b.hits_at_10)
            .then_with(|| tie_break(a, b))
    });
    worst.truncate(k);
    Extremes { best, worst }
}

/// How triple-classification decisions are made.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    /// The scorer's own threshold when it has one, else [`ThresholdMode::DevGlobal`].
    #[default]
    Auto,
    /// The scorer's own threshold (argmax for two-class heads).
    Natural,
    /// One threshold tuned on the dev split.
    DevGlobal,
    /// One threshold per relation tuned on the dev split.
    DevPerRelation,
}

impl std::str::FromStr for ThresholdMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<ThresholdMode> {
        match s {
            "auto" => Ok(ThresholdMode::Auto),
            "natural" | "argmax" => Ok(ThresholdMode::Natural),
            "dev" | "dev-global" => Ok(ThresholdMode::DevGlobal),
            "dev-per-relation" => Ok(ThresholdMode::DevPerRelation),
            _ => Err(Error::Unknown {
                kind: "threshold mode",
                name: s.to_owned(),
            }),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalOptions {
    pub hits: Vec<usize>,
    pub tie: TieRule,
    pub seed: u64,
    pub cardinality_threshold: f64,
    pub extremes_k: usize,
    pub min_support: usize,
    pub threshold_mode: ThresholdMode,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            hits: DEFAULT_HITS.to_vec(),
            tie: TieRule::Mean,
            seed: crate::scorers::DEFAULT_SEED,
            cardinality_threshold: crate::graph::DEFAULT_CARDINALITY_THRESHOLD,
            extremes_k: 10,
            min_support: 5,
            threshold_mode: ThresholdMode::Auto,
        }
    }
}

const CARDINALITY_NOTE: &str =
    "relation cardinality: 1-N iff avg tails/head > threshold and avg heads/tail <= threshold (symmetric for the \
     other categories), computed on the train split";

fn with_breakdowns(
    mut report: EvalReport,
    ranks: &[RankResult],
    bundle: &DatasetBundle,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let kg = &bundle.graph;
    let table = cardinality_table(
        &bundle.train,
        kg.num_relations(),
        opts.cardinality_threshold,
    );
    report.per_cardinality = ablate_cardinality(ranks, &table, &opts.hits)?;
    report.extremes = Some(per_relation_extremes(
        ranks,
        kg,
        opts.extremes_k,
        opts.min_support,
    ));
    report.tie_rule = Some(opts.tie);
    report.seed = Some(opts.seed);
    report.notes.push(format!(
        "{CARDINALITY_NOTE} (threshold {})",
        opts.cardinality_threshold
    ));
    Ok(report)
}

/// Filtered head and tail ranking of the test split.
pub fn evaluate_link_prediction(
    scorer: &dyn Scorer,
    bundle: &DatasetBundle,
    opts: &EvalOptions,
) -> Result<(EvalReport, Vec<RankResult>)> {
    let ranks = rank_link_all(
        scorer,
        &bundle.graph,
        &bundle.test,
        bundle.full_positives(),
        opts.tie,
    )?;
    let report = with_breakdowns(
        aggregate(&ranks, &opts.hits, &bundle.graph)?,
        &ranks,
        bundle,
        opts,
    )?;
    Ok((report, ranks))
}

/// Filtered relation ranking of the test split.
pub fn evaluate_relation_prediction(
    scorer: &dyn Scorer,
    bundle: &DatasetBundle,
    opts: &EvalOptions,
) -> Result<(EvalReport, Vec<RankResult>)> {
    let ranks = rank_relation_all(
        scorer,
        &bundle.graph,
        &bundle.test,
        bundle.full_positives(),
        opts.tie,
    )?;
    let report = with_breakdowns(
        aggregate(&ranks, &opts.hits, &bundle.graph)?,
        &ranks,
        bundle,
        opts,
    )?;
    Ok((report, ranks))
}

/// Balanced evaluation set: every triple of `split` plus one corruption.
pub fn classification_set(
    bundle: &DatasetBundle,
    split: &[Triple],
    seed: u64,
) -> Result<Vec<LabeledTriple>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Corrupter::for_graph(&bundle.graph).negative_batch(split, 1, &mut rng)
}

/// Triple-classification accuracy on the balanced test set.
pub fn evaluate_triple_classification(
    scorer: &dyn Scorer,
    bundle: &DatasetBundle,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let kg = &bundle.graph;
    let test = classification_set(bundle, &bundle.test, opts.seed)?;
    let tune = |per_relation: bool| -> Result<DecisionRule> {
        let dev = classification_set(bundle, &bundle.dev, opts.seed.wrapping_add(1))?;
        if dev.is_empty() {
            return Err(Error::InvalidConfig(
                "threshold tuning needs a non-empty dev split".into(),
            ));
        }
        let triples: Vec<Triple> = dev.iter().map(|l| l.triple).collect();
        let scores = score_chunked(scorer, kg, &triples)?;
        let labels: Vec<u8> = dev.iter().map(|l| l.label).collect();
        Ok(if per_relation {
            DecisionRule::tune_per_relation(&dev, &scores)
        } else {
            DecisionRule::tune_global(&scores, &labels)
        })
    };
    let rule = match (opts.threshold_mode, scorer.decision_threshold()) {
        (ThresholdMode::Auto | ThresholdMode::Natural, Some(threshold)) => {
            DecisionRule::Global { threshold }
        }
        (ThresholdMode::Natural, None) => {
            return Err(Error::Unsupported("a natural decision threshold"))
        }
        (ThresholdMode::DevPerRelation, _) => tune(true)?,
        _ => tune(false)?,
    };
    let accuracy = classification_accuracy(scorer, kg, &test, &rule)?;
    let mut report = EvalReport::empty("tc", "");
    report.count = test.len();
    report.accuracy = Some(accuracy);
    report.seed = Some(opts.seed);
    report
        .notes
        .push(format!("decision rule: {}", serde_json::to_string(&rule)?));
    Ok(report)
}

pub fn entity_pairs(tests: &[Triple]) -> Vec<(EntityId, EntityId)> {
    tests.iter().map(|t| (t.head, t.tail)).collect()
}
