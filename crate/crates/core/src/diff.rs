//! Raw attention-score differences between two models on the same sequence.

use std::io;

use thiserror::Error;

use crate::annotation::TokenIndexSet;
use crate::tensor_store::{incomparability, AttentionRun, TokenRecord};

/// Fragment coverage threshold on `|delta|` when none is given.
pub const DEFAULT_ALTERED_THRESHOLD: f64 = 0.05;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("runs not comparable: {0}")]
    NotComparable(String),
    #[error(
        "layer {layer} / head {head} out of range for {num_layers} layers x {num_heads} heads"
    )]
    OutOfRange {
        layer: usize,
        head: usize,
        num_layers: usize,
        num_heads: usize,
    },
    #[error("empty concept set")]
    EmptyConcept,
    #[error("threshold must be positive, got {0}")]
    BadThreshold(f64),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionDiff {
    pub layer: usize,
    pub head: usize,
    pub num_tokens: usize,
    /// `trained - base`, row-major by query.
    pub matrix: Vec<f64>,
    pub tokens: Vec<TokenRecord>,
    /// `(trained, base)`.
    pub model_ids: (String, String),
}

impl AttentionDiff {
    pub fn at(&self, query: usize, key: usize) -> f64 {
        self.matrix[query * self.num_tokens + key]
    }
}

pub fn raw_attention_diff(
    trained: &AttentionRun,
    base: &AttentionRun,
    layer: usize,
    head: usize,
) -> Result<AttentionDiff, DiffError> {
    if let Some(why) = incomparability(trained, base) {
        return Err(DiffError::NotComparable(why));
    }
    if layer >= base.num_layers || head >= base.num_heads {
        return Err(DiffError::OutOfRange {
            layer,
            head,
            num_layers: base.num_layers,
            num_heads: base.num_heads,
        });
    }
    let matrix = trained
        .head(layer, head)
        .iter()
        .zip(base.head(layer, head))
        .map(|(&t, &b)| f64::from(t) - f64::from(b))
        .collect();
    Ok(AttentionDiff {
        layer,
        head,
        num_tokens: base.num_tokens,
        matrix,
        tokens: base.tokens.clone(),
        model_ids: (trained.model_id.clone(), base.model_id.clone()),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelationChange {
    pub query: usize,
    pub key: usize,
    pub delta: f64,
    pub query_text: String,
    pub key_text: String,
}

/// The `k` largest `|delta|` entries. Ties go to the lower query, then the lower key.
pub fn top_relation_changes(diff: &AttentionDiff, k: usize) -> Vec<RelationChange> {
    let t = diff.num_tokens;
    let mut cells: Vec<(usize, usize, f64)> = (0..t)
        .flat_map(|q| (0..t).map(move |key| (q, key)))
        .map(|(q, key)| (q, key, diff.at(q, key)))
        .collect();
    cells.sort_by(|a, b| {
        b.2.abs()
            .total_cmp(&a.2.abs())
            .then(a.0.cmp(&b.0))
            .then(a.1.cmp(&b.1))
    });
    cells
        .into_iter()
        .take(k)
        .map(|(query, key, delta)| RelationChange {
            query,
            key,
            delta,
            query_text: diff.tokens[query].text.clone(),
            key_text: diff.tokens[key].text.clone(),
        })
        .collect()
}

pub fn write_relations_csv<W: io::Write>(
    changes: &[RelationChange],
    writer: W,
) -> Result<(), DiffError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "query_index",
        "query_text",
        "key_index",
        "key_text",
        "delta",
    ])?;
    for c in changes {
        w.write_record([
            c.query.to_string(),
            c.query_text.clone(),
            c.key.to_string(),
            c.key_text.clone(),
            c.delta.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FragmentCoverage {
    pub token_index: usize,
    pub token_text: String,
    /// Largest `|delta|` in this token's key column.
    pub max_abs_delta: f64,
    /// Query row where the largest change occurs.
    pub argmax_query: usize,
    pub altered: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FragmentReport {
    pub threshold: f64,
    pub fragments: Vec<FragmentCoverage>,
}

impl FragmentReport {
    pub fn altered(&self) -> impl Iterator<Item = &FragmentCoverage> {
        self.fragments.iter().filter(|f| f.altered)
    }

    pub fn write_csv<W: io::Write>(&self, writer: W) -> Result<(), DiffError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "token_index",
            "token_text",
            "max_abs_delta",
            "argmax_query",
            "altered",
        ])?;
        for f in &self.fragments {
            w.write_record([
                f.token_index.to_string(),
                f.token_text.clone(),
                f.max_abs_delta.to_string(),
                f.argmax_query.to_string(),
                f.altered.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Which concept tokens, as keys, had attention to them changed by at least `threshold`.
pub fn concept_fragment_coverage(
    diff: &AttentionDiff,
    concept: &TokenIndexSet,
    threshold: f64,
) -> Result<FragmentReport, DiffError> {
    if threshold.is_nan() || threshold <= 0.0 {
        return Err(DiffError::BadThreshold(threshold));
    }
    if concept.is_empty() {
        return Err(DiffError::EmptyConcept);
    }
    let t = diff.num_tokens;
    let fragments = concept
        .indices
        .iter()
        .filter(|&&k| k < t)
        .map(|&key| {
            let (argmax_query, max_abs_delta) =
                (0..t)
                    .map(|q| (q, diff.at(q, key).abs()))
                    .fold(
                        (0, 0.0f64),
                        |best, cur| if cur.1 > best.1 { cur } else { best },
                    );
            FragmentCoverage {
                token_index: key,
                token_text: diff.tokens[key].text.clone(),
                max_abs_delta,
                argmax_query,
                altered: max_abs_delta >= threshold,
            }
        })
        .collect();
    Ok(FragmentReport {
        threshold,
        fragments,
    })
}
