//! Rendering of triples and entity pairs as classifier input sequences.
//!
//! Triples become `[CLS] head [SEP] relation [SEP] tail [SEP]` and entity
//! pairs `[CLS] head [SEP] tail [SEP]`. Head and tail tokens share segment
//! 0, relation tokens use segment 1, and positions run from 1. Entity type
//! labels and relation synonyms are appended to the element's own label
//! inside the same segment.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{EntityId, KnowledgeGraph, RelationId, Triple};

pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const DEFAULT_MAX_LEN: usize = 512;

pub const ENTITY_SEGMENT: u8 = 0;
pub const RELATION_SEGMENT: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TokenKind {
    Cls,
    Sep,
    Word,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Token {
    pub text: String,
    pub kind: TokenKind,
}

impl Token {
    pub fn cls() -> Token {
        Token {
            text: CLS.to_owned(),
            kind: TokenKind::Cls,
        }
    }

    pub fn sep() -> Token {
        Token {
            text: SEP.to_owned(),
            kind: TokenKind::Sep,
        }
    }

    pub fn word(text: impl Into<String>) -> Token {
        Token {
            text: text.into(),
            kind: TokenKind::Word,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputSequence {
    pub tokens: Vec<Token>,
    pub segment_ids: Vec<u8>,
    /// 1-based.
    pub position_ids: Vec<u32>,
    pub truncated: bool,
}

impl InputSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.tokens
            .iter()
            .filter(|t| t.kind == TokenKind::Word)
            .map(|t| t.text.as_str())
    }
}

/// Lowercases and splits on whitespace and punctuation. A `.` or `,`
/// between two digits is kept, so `"CI(2.9, 3.2)"` yields `ci 2.9 3.2`.
pub fn tokenize(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut current = String::new();
    for (i, &c) in chars.iter().enumerate() {
        let numeric_joiner = (c == '.' || c == ',')
            && i > 0
            && chars[i - 1].is_ascii_digit()
            && chars.get(i + 1).is_some_and(|n| n.is_ascii_digit());
        if c.is_alphanumeric() || numeric_joiner {
            current.extend(c.to_lowercase());
        } else if !current.is_empty() {
            out.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        out.push(current);
    }
    out
}

/// Tokens of one triple element: its label followed by each augmentation.
pub fn element_sentence<S: AsRef<str>>(label: &str, augmentations: &[S]) -> Result<Vec<Token>> {
    let mut tokens: Vec<Token> = tokenize(label).into_iter().map(Token::word).collect();
    if tokens.is_empty() {
        return Err(Error::UnlabeledElement(label.to_owned()));
    }
    for aug in augmentations {
        tokens.extend(tokenize(aug.as_ref()).into_iter().map(Token::word));
    }
    Ok(tokens)
}

pub fn entity_sentence(kg: &KnowledgeGraph, e: EntityId) -> Result<Vec<Token>> {
    element_sentence(kg.entity_label(e), kg.entity_types(e))
}

pub fn relation_sentence(kg: &KnowledgeGraph, r: RelationId) -> Result<Vec<Token>> {
    element_sentence(kg.relation_label(r), kg.relation_synonyms(r))
}

/// Lays out `[CLS] e1 [SEP] e2 [SEP] ...`, trimming the currently longest
/// element from its end until the sequence fits `max_len`.
pub fn assemble(mut elements: Vec<(Vec<Token>, u8)>, max_len: usize) -> Result<InputSequence> {
    let specials = 1 + elements.len();
    if max_len < specials + elements.len() {
        return Err(Error::MaxLenTooSmall {
            max_len,
            elements: elements.len(),
        });
    }
    let budget = max_len - specials;
    let mut total: usize = elements.iter().map(|(t, _)| t.len()).sum();
    let truncated = total > budget;
    while total > budget {
        let longest = elements
            .iter()
            .enumerate()
            .max_by(|(ia, a), (ib, b)| a.0.len().cmp(&b.0.len()).then(ib.cmp(ia)))
            .map(|(i, _)| i)
            .expect("at least one element");
        elements[longest].0.pop();
        total -= 1;
    }

    let len = specials + total;
    let mut tokens = Vec::with_capacity(len);
    let mut segment_ids = Vec::with_capacity(len);
    tokens.push(Token::cls());
    segment_ids.push(ENTITY_SEGMENT);
    for (words, segment) in elements {
        segment_ids.extend(std::iter::repeat_n(segment, words.len() + 1));
        tokens.extend(words);
        tokens.push(Token::sep());
    }
    Ok(InputSequence {
        position_ids: (1..=tokens.len() as u32).collect(),
        tokens,
        segment_ids,
        truncated,
    })
}

pub fn triple_sequence(kg: &KnowledgeGraph, t: &Triple, max_len: usize) -> Result<InputSequence> {
    assemble(
        vec![
            (entity_sentence(kg, t.head)?, ENTITY_SEGMENT),
            (relation_sentence(kg, t.relation)?, RELATION_SEGMENT),
            (entity_sentence(kg, t.tail)?, ENTITY_SEGMENT),
        ],
        max_len,
    )
}

pub fn pair_sequence(
    kg: &KnowledgeGraph,
    head: EntityId,
    tail: EntityId,
    max_len: usize,
) -> Result<InputSequence> {
    assemble(
        vec![
            (entity_sentence(kg, head)?, ENTITY_SEGMENT),
            (entity_sentence(kg, tail)?, ENTITY_SEGMENT),
        ],
        max_len,
    )
}
