//! Concept annotations and their alignment onto token positions.

use std::collections::{BTreeSet, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_general_category::{get_general_category, GeneralCategory};

use crate::tensor_store::AttentionRun;

/// The bundled seven-sequence legal concept corpus.
pub const CONCEPT_CORPUS: &str = include_str!("../../../corpus/concepts.json");

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error("malformed annotation document: {0}")]
    Malformed(#[from] serde_json::Error),
    #[error("span out of bounds: {sequence_id}/{label} [{char_start}, {char_end}) in text of length {text_len}")]
    SpanOutOfBounds {
        sequence_id: String,
        label: String,
        char_start: usize,
        char_end: usize,
        text_len: usize,
    },
    #[error("empty label in sequence {0}")]
    EmptyLabel(String),
    #[error("duplicate concept {label:?} in sequence {sequence_id} at [{char_start}, {char_end})")]
    Duplicate {
        sequence_id: String,
        label: String,
        char_start: usize,
        char_end: usize,
    },
    #[error("duplicate sequence id {0}")]
    DuplicateSequence(String),
    #[error("annotation text for {sequence_id} does not match the run's source text")]
    TextMismatch { sequence_id: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConceptAnnotation {
    pub sequence_id: String,
    pub label: String,
    pub char_start: usize,
    pub char_end: usize,
    pub source_text: String,
}

impl ConceptAnnotation {
    /// The annotated substring.
    pub fn span_text(&self) -> String {
        self.source_text
            .chars()
            .skip(self.char_start)
            .take(self.char_end - self.char_start)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum IndexSetKind {
    Concept,
    Filter,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenIndexSet {
    pub indices: BTreeSet<usize>,
    pub kind: IndexSetKind,
}

impl TokenIndexSet {
    pub fn new(kind: IndexSetKind, indices: impl IntoIterator<Item = usize>) -> Self {
        Self {
            indices: indices.into_iter().collect(),
            kind,
        }
    }

    pub fn empty(kind: IndexSetKind) -> Self {
        Self {
            indices: BTreeSet::new(),
            kind,
        }
    }

    pub fn contains(&self, index: usize) -> bool {
        self.indices.contains(&index)
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn union(&self, other: &TokenIndexSet) -> TokenIndexSet {
        TokenIndexSet {
            indices: self.indices.union(&other.indices).copied().collect(),
            kind: self.kind,
        }
    }

    /// Membership mask of length `len`; indices at or beyond `len` are ignored.
    pub fn mask(&self, len: usize) -> Vec<bool> {
        let mut m = vec![false; len];
        for &i in self.indices.range(..len) {
            m[i] = true;
        }
        m
    }
}

#[derive(Debug, Deserialize, Serialize)]
struct Document {
    sequences: Vec<SequenceEntry>,
}

#[derive(Debug, Deserialize, Serialize)]
struct SequenceEntry {
    sequence_id: String,
    text: String,
    #[serde(default)]
    concepts: Vec<ConceptEntry>,
}

#[derive(Debug, Deserialize, Serialize)]
struct ConceptEntry {
    label: String,
    char_start: usize,
    char_end: usize,
}

/// Parses an annotation document.
///
/// A label may appear more than once within a sequence to describe a
/// multi-range concept, provided the ranges do not overlap. Repeating an
/// overlapping range under the same label is rejected as a duplicate.
pub fn parse_annotations(content: &str) -> Result<Vec<ConceptAnnotation>, AnnotationError> {
    let doc: Document = serde_json::from_str(content)?;
    let mut seen_sequences = HashSet::new();
    let mut out = Vec::new();
    for seq in doc.sequences {
        if !seen_sequences.insert(seq.sequence_id.clone()) {
            return Err(AnnotationError::DuplicateSequence(seq.sequence_id));
        }
        let text_len = seq.text.chars().count();
        let mut accepted: Vec<&ConceptEntry> = Vec::new();
        for c in &seq.concepts {
            if c.label.trim().is_empty() {
                return Err(AnnotationError::EmptyLabel(seq.sequence_id.clone()));
            }
            if c.char_start >= c.char_end || c.char_end > text_len {
                return Err(AnnotationError::SpanOutOfBounds {
                    sequence_id: seq.sequence_id.clone(),
                    label: c.label.clone(),
                    char_start: c.char_start,
                    char_end: c.char_end,
                    text_len,
                });
            }
            let clash = accepted.iter().any(|p| {
                p.label == c.label && p.char_start < c.char_end && c.char_start < p.char_end
            });
            if clash {
                return Err(AnnotationError::Duplicate {
                    sequence_id: seq.sequence_id.clone(),
                    label: c.label.clone(),
                    char_start: c.char_start,
                    char_end: c.char_end,
                });
            }
            accepted.push(c);
            out.push(ConceptAnnotation {
                sequence_id: seq.sequence_id.clone(),
                label: c.label.clone(),
                char_start: c.char_start,
                char_end: c.char_end,
                source_text: seq.text.clone(),
            });
        }
    }
    Ok(out)
}

/// Serializes annotations back into the document format, grouping by sequence
/// in first-seen order.
pub fn annotations_to_json(annotations: &[ConceptAnnotation]) -> String {
    let mut sequences: Vec<SequenceEntry> = Vec::new();
    for a in annotations {
        let idx = match sequences
            .iter()
            .position(|s| s.sequence_id == a.sequence_id)
        {
            Some(i) => i,
            None => {
                sequences.push(SequenceEntry {
                    sequence_id: a.sequence_id.clone(),
                    text: a.source_text.clone(),
                    concepts: Vec::new(),
                });
                sequences.len() - 1
            }
        };
        sequences[idx].concepts.push(ConceptEntry {
            label: a.label.clone(),
            char_start: a.char_start,
            char_end: a.char_end,
        });
    }
    let mut s = serde_json::to_string_pretty(&Document { sequences })
        .expect("annotation document serializes");
    s.push('\n');
    s
}

/// Token positions overlapping the annotated span by at least one character.
/// Special tokens are never included.
pub fn align_span_to_tokens(
    run: &AttentionRun,
    ann: &ConceptAnnotation,
) -> Result<TokenIndexSet, AnnotationError> {
    if run.source_text != ann.source_text {
        return Err(AnnotationError::TextMismatch {
            sequence_id: ann.sequence_id.clone(),
        });
    }
    Ok(TokenIndexSet::new(
        IndexSetKind::Concept,
        run.tokens
            .iter()
            .enumerate()
            .filter(|(_, t)| {
                !t.is_special && t.char_start < ann.char_end && ann.char_start < t.char_end
            })
            .map(|(i, _)| i),
    ))
}

/// Union of the aligned sets of several annotations (multi-range concepts).
pub fn align_concept(
    run: &AttentionRun,
    anns: &[&ConceptAnnotation],
) -> Result<TokenIndexSet, AnnotationError> {
    let mut set = TokenIndexSet::empty(IndexSetKind::Concept);
    for ann in anns {
        set = set.union(&align_span_to_tokens(run, ann)?);
    }
    Ok(set)
}

fn is_punctuation_like(c: char) -> bool {
    matches!(
        get_general_category(c),
        GeneralCategory::ConnectorPunctuation
            | GeneralCategory::DashPunctuation
            | GeneralCategory::OpenPunctuation
            | GeneralCategory::ClosePunctuation
            | GeneralCategory::InitialPunctuation
            | GeneralCategory::FinalPunctuation
            | GeneralCategory::OtherPunctuation
    ) || matches!(c, '`' | '´')
}

/// Whether a token surface form is punctuation only, ignoring whitespace.
pub fn is_punctuation_token(text: &str) -> bool {
    let mut any = false;
    for c in text.chars().filter(|c| !c.is_whitespace()) {
        if !is_punctuation_like(c) {
            return false;
        }
        any = true;
    }
    any
}

/// Keys whose incoming attention is excluded from proportions: special tokens
/// and punctuation-only tokens.
pub fn classify_filter_tokens(run: &AttentionRun) -> TokenIndexSet {
    TokenIndexSet::new(
        IndexSetKind::Filter,
        run.tokens
            .iter()
            .enumerate()
            .filter(|(_, t)| t.is_special || is_punctuation_token(&t.text))
            .map(|(i, _)| i),
    )
}
