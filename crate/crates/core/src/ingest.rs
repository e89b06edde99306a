//! TSV dataset loading, literal rewriting and seeded splitting.
//!
//! A dataset directory holds either `train.tsv`, `dev.tsv` (or `valid.tsv`)
//! and `test.tsv`, or a single `all.tsv` that is split on load. Optional
//! auxiliary files add text:
//!
//! | file                    | columns           | repeated ids |
//! |-------------------------|-------------------|--------------|
//! | `entity2text.tsv`       | id, label         | last wins    |
//! | `relation2text.tsv`     | id, label         | last wins    |
//! | `entity2type.tsv`       | id, type label    | appended     |
//! | `relation2synonyms.tsv` | id, synonym       | appended     |

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{GraphBuilder, KnowledgeGraph, Triple, TripleSet};

pub type RawTriple = (String, String, String);

pub const ENTITY_TEXT_FILE: &str = "entity2text.tsv";
pub const RELATION_TEXT_FILE: &str = "relation2text.tsv";
pub const ENTITY_TYPE_FILE: &str = "entity2type.tsv";
pub const RELATION_SYNONYM_FILE: &str = "relation2synonyms.tsv";
pub const META_FILE: &str = "meta.json";

fn read_utf8(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    String::from_utf8(bytes).map_err(|_| Error::NotUtf8 {
        path: path.to_owned(),
    })
}

/// Non-blank lines with their 1-based line numbers; CRLF accepted.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.split('\n')
        .enumerate()
        .map(|(i, line)| (i + 1, line.strip_suffix('\r').unwrap_or(line)))
        .filter(|(_, line)| !line.trim().is_empty())
}

fn split_fields<'a>(
    path: &Path,
    lineno: usize,
    line: &'a str,
    arity: usize,
) -> Result<Vec<&'a str>> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != arity {
        return Err(Error::MalformedLine {
            path: path.to_owned(),
            line: lineno,
            reason: format!(
                "expected {arity} tab-separated fields, found {}",
                fields.len()
            ),
        });
    }
    if let Some(i) = fields.iter().position(|f| f.is_empty()) {
        return Err(Error::MalformedLine {
            path: path.to_owned(),
            line: lineno,
            reason: format!("field {} is empty", i + 1),
        });
    }
    Ok(fields)
}

pub fn parse_triples_str(path: &Path, text: &str) -> Result<Vec<RawTriple>> {
    content_lines(text)
        .map(|(lineno, line)| {
            let f = split_fields(path, lineno, line, 3)?;
            Ok((f[0].to_owned(), f[1].to_owned(), f[2].to_owned()))
        })
        .collect()
}

/// Reads a head/relation/tail TSV file in file order.
pub fn parse_triples_file(path: impl AsRef<Path>) -> Result<Vec<RawTriple>> {
    let path = path.as_ref();
    parse_triples_str(path, &read_utf8(path)?)
}

/// Reads an `id<TAB>text` auxiliary file.
pub fn parse_pairs_file(path: impl AsRef<Path>) -> Result<Vec<(String, String)>> {
    let path = path.as_ref();
    let text = read_utf8(path)?;
    content_lines(&text)
        .map(|(lineno, line)| {
            let f = split_fields(path, lineno, line, 2)?;
            Ok((f[0].to_owned(), f[1].to_owned()))
        })
        .collect()
}

/// Default literal detector: quoted strings, numbers and `^^`-typed values.
pub fn default_is_literal(value: &str) -> bool {
    let v = value.trim();
    if v.len() >= 2 && v.starts_with('"') {
        return true;
    }
    if v.contains("^^") {
        return true;
    }
    v.chars().any(|c| c.is_ascii_digit()) && v.parse::<f64>().is_ok()
}

/// Maps generated `/literal_k` ids back to the literal text, in id order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LiteralMap {
    pub entries: Vec<(String, String)>,
}

impl LiteralMap {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub fn literal_id(k: usize) -> String {
    format!("/literal_{k}")
}

/// Rewrites literal tails as sequential `/literal_k` entities. Identical
/// literal strings share an id; ids follow first appearance.
pub fn literalize(
    raw: &[RawTriple],
    is_literal: impl Fn(&str) -> bool,
) -> (Vec<RawTriple>, LiteralMap) {
    let mut ids: std::collections::HashMap<&str, usize> = Default::default();
    let mut map = LiteralMap::default();
    let rewritten = raw
        .iter()
        .map(|(h, r, t)| {
            if !is_literal(t) {
                return (h.clone(), r.clone(), t.clone());
            }
            let k = *ids.entry(t.as_str()).or_insert_with(|| {
                map.entries.push((literal_id(map.entries.len()), t.clone()));
                map.entries.len() - 1
            });
            (h.clone(), r.clone(), map.entries[k].0.clone())
        })
        .collect();
    (rewritten, map)
}

/// Text stores attached to a graph when it is built.
#[derive(Debug, Clone, Default)]
pub struct Auxiliary {
    pub entity_text: Vec<(String, String)>,
    pub relation_text: Vec<(String, String)>,
    pub entity_types: Vec<(String, String)>,
    pub relation_synonyms: Vec<(String, String)>,
}

impl Auxiliary {
    /// Loads whichever auxiliary files exist in `dir`.
    pub fn load(dir: &Path) -> Result<Auxiliary> {
        let read = |name: &str| -> Result<Vec<(String, String)>> {
            let path = dir.join(name);
            if path.exists() {
                parse_pairs_file(path)
            } else {
                Ok(Vec::new())
            }
        };
        Ok(Auxiliary {
            entity_text: read(ENTITY_TEXT_FILE)?,
            relation_text: read(RELATION_TEXT_FILE)?,
            entity_types: read(ENTITY_TYPE_FILE)?,
            relation_synonyms: read(RELATION_SYNONYM_FILE)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub dev: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.6,
            dev: 0.2,
            test: 0.2,
        }
    }
}

impl SplitRatios {
    fn validate(&self) -> Result<()> {
        let positive = self.train > 0.0 && self.dev > 0.0 && self.test > 0.0;
        if !positive || (self.train + self.dev + self.test - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidRatios((self.train, self.dev, self.test)));
        }
        Ok(())
    }

    /// (train, dev, test) sizes for `n` triples. Held-out splits are
    /// rounded up and train takes the remainder.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let held_out = |ratio: f64| ((n as f64 * ratio) - 1e-9).ceil().max(0.0) as usize;
        let dev = held_out(self.dev);
        let test = held_out(self.test);
        (n - dev - test, dev, test)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BundleMeta {
    pub seed: Option<u64>,
    pub ratios: Option<SplitRatios>,
    pub literal_count: usize,
}

/// A graph together with its train/dev/test partition.
#[derive(Debug, Clone)]
pub struct DatasetBundle {
    pub train: Vec<Triple>,
    pub dev: Vec<Triple>,
    pub test: Vec<Triple>,
    pub graph: KnowledgeGraph,
    pub literals: LiteralMap,
    pub meta: BundleMeta,
}

impl DatasetBundle {
    /// Builds a bundle from already-partitioned raw triples. Entities are
    /// interned in train, dev, test order. Duplicates inside a split
    /// collapse; a triple shared between splits is an error.
    pub fn from_splits(
        train: &[RawTriple],
        dev: &[RawTriple],
        test: &[RawTriple],
        aux: &Auxiliary,
        literals: LiteralMap,
    ) -> Result<DatasetBundle> {
        let mut builder = GraphBuilder::default();
        let mut seen = TripleSet::new();
        let mut intern = |raw: &[RawTriple], name: &str| -> Result<Vec<Triple>> {
            let mut local = TripleSet::new();
            let mut out = Vec::with_capacity(raw.len());
            for (h, r, t) in raw {
                let triple = builder.add(h, r, t);
                if !local.insert(triple) {
                    continue;
                }
                if !seen.insert(triple) {
                    return Err(Error::InvalidConfig(format!(
                        "triple ({h}, {r}, {t}) in the {name} split also appears in an earlier split"
                    )));
                }
                out.push(triple);
            }
            Ok(out)
        };
        let train = intern(train, "train")?;
        let dev = intern(dev, "dev")?;
        let test = intern(test, "test")?;

        for (id, label) in &literals.entries {
            builder.set_entity_label(id, label);
        }
        for (id, label) in &aux.entity_text {
            builder.set_entity_label(id, label);
        }
        for (id, label) in &aux.relation_text {
            builder.set_relation_label(id, label);
        }
        for (id, ty) in &aux.entity_types {
            builder.add_entity_type(id, ty);
        }
        for (id, syn) in &aux.relation_synonyms {
            builder.add_relation_synonym(id, syn);
        }
        let meta = BundleMeta {
            literal_count: literals.len(),
            ..Default::default()
        };
        Ok(DatasetBundle {
            train,
            dev,
            test,
            graph: builder.build(),
            literals,
            meta,
        })
    }

    /// Union of all three splits.
    pub fn full_positives(&self) -> &TripleSet {
        self.graph.positives()
    }

    pub fn train_positives(&self) -> TripleSet {
        self.train.iter().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.dev.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn raw(&self, triples: &[Triple]) -> Vec<RawTriple> {
        triples
            .iter()
            .map(|t| {
                let (h, r, t) = self.graph.raw(t);
                (h.to_owned(), r.to_owned(), t.to_owned())
            })
            .collect()
    }

    /// Writes the bundle in the directory layout [`load_dataset`] reads.
    /// Output is a pure function of the bundle.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut written = Vec::new();
        let mut emit = |name: &str, body: String| -> Result<()> {
            let path = dir.join(name);
            fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
            written.push(path);
            Ok(())
        };
        let triples_tsv = |raw: Vec<RawTriple>| {
            raw.iter()
                .map(|(h, r, t)| format!("{h}\t{r}\t{t}\n"))
                .collect::<String>()
        };
        emit("train.tsv", triples_tsv(self.raw(&self.train)))?;
        emit("dev.tsv", triples_tsv(self.raw(&self.dev)))?;
        emit("test.tsv", triples_tsv(self.raw(&self.test)))?;

        let kg = &self.graph;
        let mut entity_text = String::new();
        let mut entity_types = String::new();
        for e in kg.entity_ids() {
            if kg.entity_label(e) != kg.entity_name(e) {
                entity_text += &format!("{}\t{}\n", kg.entity_name(e), kg.entity_label(e));
            }
            for ty in kg.entity_types(e) {
                entity_types += &format!("{}\t{}\n", kg.entity_name(e), ty);
            }
        }
        let mut relation_text = String::new();
        let mut relation_synonyms = String::new();
        for r in kg.relation_ids() {
            if kg.relation_label(r) != kg.relation_name(r) {
                relation_text += &format!("{}\t{}\n", kg.relation_name(r), kg.relation_label(r));
            }
            for syn in kg.relation_synonyms(r) {
                relation_synonyms += &format!("{}\t{}\n", kg.relation_name(r), syn);
            }
        }
        for (name, body) in [
            (ENTITY_TEXT_FILE, entity_text),
            (RELATION_TEXT_FILE, relation_text),
            (ENTITY_TYPE_FILE, entity_types),
            (RELATION_SYNONYM_FILE, relation_synonyms),
        ] {
            if !body.is_empty() {
                emit(name, body)?;
            }
        }
        emit(META_FILE, serde_json::to_string_pretty(&self.meta)? + "\n")?;
        Ok(written)
    }
}

/// Deterministically shuffles distinct triples under `seed` and partitions
/// them by `ratios`.
pub fn split(
    triples: &[RawTriple],
    ratios: SplitRatios,
    seed: u64,
    aux: &Auxiliary,
    literals: LiteralMap,
) -> Result<DatasetBundle> {
    ratios.validate()?;
    let mut seen = HashSet::new();
    let mut unique: Vec<RawTriple> = triples
        .iter()
        .filter(|t| seen.insert(*t))
        .cloned()
        .collect();
    if unique.len() < 3 {
        return Err(Error::DatasetTooSmall(unique.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    unique.shuffle(&mut rng);
    let (n_train, n_dev, _) = ratios.sizes(unique.len());
    let (train, rest) = unique.split_at(n_train);
    let (dev, test) = rest.split_at(n_dev);
    let mut bundle = DatasetBundle::from_splits(train, dev, test, aux, literals)?;
    bundle.meta.seed = Some(seed);
    bundle.meta.ratios = Some(ratios);
    Ok(bundle)
}

#[derive(Debug, Clone)]
pub struct LoadOptions {
    /// Rewrite literal tails to `/literal_k` entities.
    pub literalize: bool,
    pub ratios: SplitRatios,
    pub seed: u64,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            literalize: false,
            ratios: SplitRatios::default(),
            seed: 42,
        }
    }
}

/// Loads a dataset directory. Pre-split files are used as-is; a lone
/// `all.tsv` is split under `opts.seed`.
pub fn load_dataset(dir: impl AsRef<Path>, opts: &LoadOptions) -> Result<DatasetBundle> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
        ));
    }
    let aux = Auxiliary::load(dir)?;
    let mut meta = if dir.join(META_FILE).exists() {
        let path = dir.join(META_FILE);
        serde_json::from_str::<BundleMeta>(&read_utf8(&path)?)?
    } else {
        BundleMeta::default()
    };

    let train_path = dir.join("train.tsv");
    if train_path.exists() {
        let dev_path = ["dev.tsv", "valid.tsv"]
            .iter()
            .map(|n| dir.join(n))
            .find(|p| p.exists())
            .unwrap_or_else(|| dir.join("dev.tsv"));
        let train = parse_triples_file(&train_path)?;
        let dev = parse_triples_file(&dev_path)?;
        let test = parse_triples_file(dir.join("test.tsv"))?;
        let (train, dev, test, literals) = if opts.literalize {
            let all: Vec<RawTriple> = train.iter().chain(&dev).chain(&test).cloned().collect();
            let (rewritten, literals) = literalize(&all, default_is_literal);
            let (a, rest) = rewritten.split_at(train.len());
            let (b, c) = rest.split_at(dev.len());
            (a.to_vec(), b.to_vec(), c.to_vec(), literals)
        } else {
            (train, dev, test, LiteralMap::default())
        };
        let mut bundle = DatasetBundle::from_splits(&train, &dev, &test, &aux, literals)?;
        meta.literal_count = meta.literal_count.max(bundle.literals.len());
        bundle.meta = meta;
        return Ok(bundle);
    }

    let all_path = dir.join("all.tsv");
    if !all_path.exists() {
        return Err(Error::io(
            &train_path,
            std::io::Error::new(
                std::io::ErrorKind::NotFound,
                "dataset needs train.tsv/dev.tsv/test.tsv or all.tsv",
            ),
        ));
    }
    let raw = parse_triples_file(&all_path)?;
    let (raw, literals) = if opts.literalize {
        literalize(&raw, default_is_literal)
    } else {
        (raw, LiteralMap::default())
    };
    split(&raw, opts.ratios, opts.seed, &aux, literals)
}
