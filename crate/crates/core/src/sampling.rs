//! Negative triples by entity corruption.
//!
//! A corruption replaces the head or the tail of a positive triple with a
//! different entity such that the result is not a known positive. The
//! replacement is uniform over all valid entities: rejection sampling runs
//! for up to `retry_cap` draws, then the valid set is enumerated.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{EntityId, KnowledgeGraph, Side, Triple, TripleSet};

pub const DEFAULT_RETRY_CAP: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabeledTriple {
    pub triple: Triple,
    /// 1 for positives, 0 for corruptions.
    pub label: u8,
}

#[derive(Debug, Clone, Copy)]
pub struct Corrupter<'a> {
    num_entities: usize,
    known: &'a TripleSet,
    retry_cap: usize,
}

impl<'a> Corrupter<'a> {
    pub fn new(num_entities: usize, known: &'a TripleSet) -> Self {
        Corrupter {
            num_entities,
            known,
            retry_cap: DEFAULT_RETRY_CAP,
        }
    }

    /// Excludes the graph's own positive set.
    pub fn for_graph(kg: &'a KnowledgeGraph) -> Self {
        Self::new(kg.num_entities(), kg.positives())
    }

    pub fn with_retry_cap(mut self, retry_cap: usize) -> Self {
        self.retry_cap = retry_cap;
        self
    }

    fn replace(t: &Triple, side: Side, e: EntityId) -> Triple {
        match side {
            Side::Head => Triple { head: e, ..*t },
            _ => Triple { tail: e, ..*t },
        }
    }

    pub fn corrupt<R: Rng + ?Sized>(&self, t: &Triple, side: Side, rng: &mut R) -> Result<Triple> {
        let original = match side {
            Side::Head => t.head,
            Side::Tail => t.tail,
            Side::Relation => return Err(Error::Unsupported("relation corruption")),
        };
        if self.num_entities < 2 {
            return Err(Error::TooFewEntities(self.num_entities));
        }
        // Draw from the n-1 entities other than the original.
        let draw = |rng: &mut R| {
            let k = rng.random_range(0..self.num_entities as u32 - 1);
            EntityId(if k >= original.0 { k + 1 } else { k })
        };
        for _ in 0..self.retry_cap {
            let candidate = Self::replace(t, side, draw(rng));
            if !self.known.contains(&candidate) {
                return Ok(candidate);
            }
        }
        let valid: Vec<Triple> = (0..self.num_entities as u32)
            .map(EntityId)
            .filter(|&e| e != original)
            .map(|e| Self::replace(t, side, e))
            .filter(|c| !self.known.contains(c))
            .collect();
        if valid.is_empty() {
            return Err(Error::SaturatedNeighborhood {
                triple: t.to_string(),
                side: if side == Side::Head { "head" } else { "tail" },
            });
        }
        Ok(valid[rng.random_range(0..valid.len())])
    }

    /// Each positive (label 1) followed by `ratio` corruptions (label 0),
    /// the side of every corruption chosen uniformly.
    pub fn negative_batch<R: Rng + ?Sized>(
        &self,
        positives: &[Triple],
        ratio: usize,
        rng: &mut R,
    ) -> Result<Vec<LabeledTriple>> {
        if ratio == 0 {
            return Err(Error::InvalidConfig(
                "negative ratio must be at least 1".into(),
            ));
        }
        let mut out = Vec::with_capacity(positives.len() * (1 + ratio));
        for t in positives {
            out.push(LabeledTriple {
                triple: *t,
                label: 1,
            });
            for _ in 0..ratio {
                let side = if rng.random_bool(0.5) {
                    Side::Head
                } else {
                    Side::Tail
                };
                let triple = self.corrupt(t, side, rng)?;
                out.push(LabeledTriple { triple, label: 0 });
            }
        }
        Ok(out)
    }

    /// Sharded variant of [`negative_batch`](Self::negative_batch): shard `i`
    /// draws from [`shard_rng`]`(seed, i)`, so the output does not depend on
    /// the number of worker threads.
    pub fn par_negative_batch(
        &self,
        positives: &[Triple],
        ratio: usize,
        seed: u64,
        shard_size: usize,
    ) -> Result<Vec<LabeledTriple>> {
        let shards: Vec<Vec<LabeledTriple>> = positives
            .par_chunks(shard_size.max(1))
            .enumerate()
            .map(|(i, chunk)| self.negative_batch(chunk, ratio, &mut shard_rng(seed, i as u64)))
            .collect::<Result<_>>()?;
        Ok(shards.concat())
    }
}

/// Independent stream `shard` of the generator seeded with `seed`.
pub fn shard_rng(seed: u64, shard: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(shard);
    rng
}

pub fn corrupt<R: Rng + ?Sized>(
    kg: &KnowledgeGraph,
    t: &Triple,
    side: Side,
    rng: &mut R,
) -> Result<Triple> {
    Corrupter::for_graph(kg).corrupt(t, side, rng)
}

pub fn negative_batch<R: Rng + ?Sized>(
    kg: &KnowledgeGraph,
    positives: &[Triple],
    ratio: usize,
    rng: &mut R,
) -> Result<Vec<LabeledTriple>> {
    Corrupter::for_graph(kg).negative_batch(positives, ratio, rng)
}
