//! Interned, immutable knowledge graph.

use std::collections::{HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntityId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RelationId(pub u32);

impl EntityId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl RelationId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

impl Triple {
    pub fn new(head: u32, relation: u32, tail: u32) -> Self {
        Triple {
            head: EntityId(head),
            relation: RelationId(relation),
            tail: EntityId(tail),
        }
    }
}

impl fmt::Display for Triple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.head.0, self.relation.0, self.tail.0)
    }
}

pub type TripleSet = HashSet<Triple>;

/// Which element of a triple is replaced or predicted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Head,
    Tail,
    Relation,
}

impl Side {
    pub fn as_str(self) -> &'static str {
        match self {
            Side::Head => "head",
            Side::Tail => "tail",
            Side::Relation => "relation",
        }
    }
}

/// String interner handing out dense ids in first-appearance order.
#[derive(Debug, Clone, Default)]
pub struct Interner {
    names: Vec<String>,
    index: HashMap<String, u32>,
}

impl Interner {
    pub fn intern(&mut self, name: &str) -> u32 {
        if let Some(&id) = self.index.get(name) {
            return id;
        }
        let id = self.names.len() as u32;
        self.names.push(name.to_owned());
        self.index.insert(name.to_owned(), id);
        id
    }

    pub fn get(&self, name: &str) -> Option<u32> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: u32) -> &str {
        &self.names[id as usize]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// The positive triple set together with the text stores used to render
/// triples as sequences. Immutable once built.
#[derive(Debug, Clone, Default)]
pub struct KnowledgeGraph {
    entities: Interner,
    relations: Interner,
    triples: Vec<Triple>,
    positives: TripleSet,
    entity_labels: Vec<String>,
    relation_labels: Vec<String>,
    entity_types: Vec<Vec<String>>,
    relation_synonyms: Vec<Vec<String>>,
}

impl KnowledgeGraph {
    /// Interns raw string triples; duplicates collapse to one positive.
    pub fn intern_triples<S: AsRef<str>>(raw: &[(S, S, S)]) -> KnowledgeGraph {
        let mut builder = GraphBuilder::default();
        for (h, r, t) in raw {
            builder.add(h.as_ref(), r.as_ref(), t.as_ref());
        }
        builder.build()
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn num_positives(&self) -> usize {
        self.positives.len()
    }

    pub fn contains(&self, t: &Triple) -> bool {
        self.positives.contains(t)
    }

    pub fn positives(&self) -> &TripleSet {
        &self.positives
    }

    /// Positive triples in first-appearance order.
    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn entity_id(&self, name: &str) -> Option<EntityId> {
        self.entities.get(name).map(EntityId)
    }

    pub fn relation_id(&self, name: &str) -> Option<RelationId> {
        self.relations.get(name).map(RelationId)
    }

    pub fn entity_name(&self, id: EntityId) -> &str {
        self.entities.name(id.0)
    }

    pub fn relation_name(&self, id: RelationId) -> &str {
        self.relations.name(id.0)
    }

    pub fn entity_label(&self, id: EntityId) -> &str {
        &self.entity_labels[id.index()]
    }

    pub fn relation_label(&self, id: RelationId) -> &str {
        &self.relation_labels[id.index()]
    }

    pub fn entity_types(&self, id: EntityId) -> &[String] {
        &self.entity_types[id.index()]
    }

    pub fn relation_synonyms(&self, id: RelationId) -> &[String] {
        &self.relation_synonyms[id.index()]
    }

    pub fn entity_ids(&self) -> impl Iterator<Item = EntityId> {
        (0..self.num_entities() as u32).map(EntityId)
    }

    pub fn relation_ids(&self) -> impl Iterator<Item = RelationId> {
        (0..self.num_relations() as u32).map(RelationId)
    }

    pub fn raw(&self, t: &Triple) -> (&str, &str, &str) {
        (
            self.entity_name(t.head),
            self.relation_name(t.relation),
            self.entity_name(t.tail),
        )
    }

    pub fn describe(&self, t: &Triple) -> String {
        let (h, r, t) = self.raw(t);
        format!("({h}, {r}, {t})")
    }

    pub fn relation_cardinality(
        &self,
        r: RelationId,
        threshold: f64,
    ) -> Result<RelationCardinality> {
        relation_cardinality(&self.triples, r, threshold)
    }
}

/// Incremental construction of a [`KnowledgeGraph`].
#[derive(Debug, Default)]
pub struct GraphBuilder {
    entities: Interner,
    relations: Interner,
    triples: Vec<Triple>,
    positives: TripleSet,
    entity_labels: HashMap<u32, String>,
    relation_labels: HashMap<u32, String>,
    entity_types: HashMap<u32, Vec<String>>,
    relation_synonyms: HashMap<u32, Vec<String>>,
}

impl GraphBuilder {
    pub fn add(&mut self, head: &str, relation: &str, tail: &str) -> Triple {
        let t = Triple {
            head: EntityId(self.entities.intern(head)),
            relation: RelationId(self.relations.intern(relation)),
            tail: EntityId(self.entities.intern(tail)),
        };
        if self.positives.insert(t) {
            self.triples.push(t);
        }
        t
    }

    /// Registers an entity without a triple, so that it is a ranking
    /// candidate even when no split mentions it.
    pub fn add_entity(&mut self, name: &str) -> EntityId {
        EntityId(self.entities.intern(name))
    }

    /// Labels for unknown names are ignored; returns whether it applied.
    pub fn set_entity_label(&mut self, name: &str, label: &str) -> bool {
        match self.entities.get(name) {
            Some(id) if !label.trim().is_empty() => {
                self.entity_labels.insert(id, label.to_owned());
                true
            }
            _ => false,
        }
    }

    pub fn set_relation_label(&mut self, name: &str, label: &str) -> bool {
        match self.relations.get(name) {
            Some(id) if !label.trim().is_empty() => {
                self.relation_labels.insert(id, label.to_owned());
                true
            }
            _ => false,
        }
    }

    pub fn add_entity_type(&mut self, name: &str, type_label: &str) -> bool {
        match self.entities.get(name) {
            Some(id) => {
                self.entity_types
                    .entry(id)
                    .or_default()
                    .push(type_label.to_owned());
                true
            }
            None => false,
        }
    }

    pub fn add_relation_synonym(&mut self, name: &str, synonym: &str) -> bool {
        match self.relations.get(name) {
            Some(id) => {
                self.relation_synonyms
                    .entry(id)
                    .or_default()
                    .push(synonym.to_owned());
                true
            }
            None => false,
        }
    }

    pub fn build(mut self) -> KnowledgeGraph {
        let entity_labels = (0..self.entities.len() as u32)
            .map(|id| {
                self.entity_labels
                    .remove(&id)
                    .unwrap_or_else(|| self.entities.name(id).to_owned())
            })
            .collect();
        let relation_labels = (0..self.relations.len() as u32)
            .map(|id| {
                self.relation_labels
                    .remove(&id)
                    .unwrap_or_else(|| self.relations.name(id).to_owned())
            })
            .collect();
        let entity_types = (0..self.entities.len() as u32)
            .map(|id| self.entity_types.remove(&id).unwrap_or_default())
            .collect();
        let relation_synonyms = (0..self.relations.len() as u32)
            .map(|id| self.relation_synonyms.remove(&id).unwrap_or_default())
            .collect();
        KnowledgeGraph {
            entities: self.entities,
            relations: self.relations,
            triples: self.triples,
            positives: self.positives,
            entity_labels,
            relation_labels,
            entity_types,
            relation_synonyms,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Cardinality {
    #[serde(rename = "1-1")]
    OneToOne,
    #[serde(rename = "1-N")]
    OneToMany,
    #[serde(rename = "N-1")]
    ManyToOne,
    #[serde(rename = "N-N")]
    ManyToMany,
}

impl Cardinality {
    pub const ALL: [Cardinality; 4] = [
        Cardinality::OneToOne,
        Cardinality::OneToMany,
        Cardinality::ManyToOne,
        Cardinality::ManyToMany,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Cardinality::OneToOne => "1-1",
            Cardinality::OneToMany => "1-N",
            Cardinality::ManyToOne => "N-1",
            Cardinality::ManyToMany => "N-N",
        }
    }
}

impl fmt::Display for Cardinality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelationCardinality {
    pub category: Cardinality,
    pub avg_tails_per_head: f64,
    pub avg_heads_per_tail: f64,
}

pub const DEFAULT_CARDINALITY_THRESHOLD: f64 = 1.5;

impl RelationCardinality {
    pub fn from_averages(avg_tails_per_head: f64, avg_heads_per_tail: f64, threshold: f64) -> Self {
        let many_tails = avg_tails_per_head > threshold;
        let many_heads = avg_heads_per_tail > threshold;
        let category = match (many_heads, many_tails) {
            (false, false) => Cardinality::OneToOne,
            (false, true) => Cardinality::OneToMany,
            (true, false) => Cardinality::ManyToOne,
            (true, true) => Cardinality::ManyToMany,
        };
        RelationCardinality {
            category,
            avg_tails_per_head,
            avg_heads_per_tail,
        }
    }
}

/// Categorizes `r` from the triples given (normally the training split).
pub fn relation_cardinality<'a>(
    triples: impl IntoIterator<Item = &'a Triple>,
    r: RelationId,
    threshold: f64,
) -> Result<RelationCardinality> {
    let mut heads = HashSet::new();
    let mut tails = HashSet::new();
    let mut count = 0usize;
    for t in triples.into_iter().filter(|t| t.relation == r) {
        heads.insert(t.head);
        tails.insert(t.tail);
        count += 1;
    }
    if count == 0 {
        return Err(Error::UncategorizableRelation(r.index()));
    }
    Ok(RelationCardinality::from_averages(
        count as f64 / heads.len() as f64,
        count as f64 / tails.len() as f64,
        threshold,
    ))
}

/// Cardinality of every relation; `None` for relations without triples.
pub fn cardinality_table(
    triples: &[Triple],
    num_relations: usize,
    threshold: f64,
) -> Vec<Option<RelationCardinality>> {
    let mut heads: Vec<HashSet<EntityId>> = vec![HashSet::new(); num_relations];
    let mut tails: Vec<HashSet<EntityId>> = vec![HashSet::new(); num_relations];
    let mut counts = vec![0usize; num_relations];
    let mut seen = HashSet::new();
    for t in triples {
        if !seen.insert(*t) {
            continue;
        }
        let r = t.relation.index();
        heads[r].insert(t.head);
        tails[r].insert(t.tail);
        counts[r] += 1;
    }
    (0..num_relations)
        .map(|r| {
            (counts[r] > 0).then(|| {
                RelationCardinality::from_averages(
                    counts[r] as f64 / heads[r].len() as f64,
                    counts[r] as f64 / tails[r].len() as f64,
                    threshold,
                )
            })
        })
        .collect()
}
