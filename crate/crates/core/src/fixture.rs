//! Deterministic synthetic attention runs.
//!
//! A fixture model is a stack of independent attention heads over random
//! position embeddings: no value projection, no feed-forward block, no
//! residual stream. Every random draw comes from splitmix64, so a given
//! `(config, tokens)` pair yields the same bytes on every platform.
//!
//! Draw order, each draw mapped to `[-0.5, 0.5)` and multiplied by
//! `weight_scale`:
//!
//! 1. embeddings, `T × head_dim`, row-major;
//! 2. for each layer, for each head: `W_q` then `W_k`, each `head_dim × head_dim`,
//!    row-major.
//!
//! Head `(l, h)` attends with `softmax(Q Kᵀ / sqrt(head_dim))`, `Q = E W_q`,
//! `K = E W_k`, keys after the query masked out for causal configs.

use thiserror::Error;

use crate::annotation::TokenIndexSet;
use crate::tensor_store::{AttentionRun, TokenRecord};

pub const SPLITMIX_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// Piece prefix marking a continuation of the previous word (no space before it).
pub const CONTINUATION: &str = "##";

pub const BOS_TEXT: &str = "<s>";

#[derive(Debug, Error, PartialEq)]
pub enum FixtureError {
    #[error("empty token list")]
    EmptyTokens,
    #[error("invalid fixture config: {0}")]
    InvalidConfig(String),
    #[error("boost must be positive and finite, got {0}")]
    BadBoost(f64),
    #[error("empty concept set")]
    EmptyConcept,
    #[error("concept keys carry no visible attention in any row")]
    ConceptMasked,
    #[error("layer {layer} / head {head} out of range")]
    OutOfRange { layer: usize, head: usize },
}

/// One splitmix64 step: returns `(output, next_state)`.
pub fn prng_next(state: u64) -> (u64, u64) {
    let state = state.wrapping_add(SPLITMIX_GAMMA);
    let mut z = state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    (z ^ (z >> 31), state)
}

#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        let (out, state) = prng_next(self.state);
        self.state = state;
        out
    }

    /// Uniform in `[0, 1)` from the top 53 bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[-0.5, 0.5)`.
    pub fn next_centered(&mut self) -> f64 {
        self.next_f64() - 0.5
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub seed: u64,
    pub causal: bool,
    /// Multiplies every draw; `0.0` makes all logits equal.
    pub weight_scale: f64,
    /// Prepend a zero-width start-of-sequence token.
    pub bos: bool,
    pub model_id: String,
    pub sequence_id: String,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            num_heads: 2,
            head_dim: 4,
            seed: 42,
            causal: true,
            weight_scale: 1.0,
            bos: false,
            model_id: "fixture".to_string(),
            sequence_id: "fixture".to_string(),
        }
    }
}

impl FixtureConfig {
    pub fn check(&self) -> Result<(), FixtureError> {
        if self.num_layers == 0 || self.num_heads == 0 {
            return Err(FixtureError::InvalidConfig(
                "num_layers and num_heads must be at least 1".into(),
            ));
        }
        if self.head_dim < 2 {
            return Err(FixtureError::InvalidConfig(format!(
                "head_dim must be at least 2, got {}",
                self.head_dim
            )));
        }
        if !self.weight_scale.is_finite() {
            return Err(FixtureError::InvalidConfig(
                "weight_scale must be finite".into(),
            ));
        }
        Ok(())
    }
}

/// Joins word pieces with single spaces; a piece starting with `##` is glued to
/// the previous one. Returns the text and one token per piece.
pub fn tokens_from_pieces<S: AsRef<str>>(pieces: &[S]) -> (String, Vec<TokenRecord>) {
    let mut text = String::new();
    let mut len = 0usize;
    let mut tokens = Vec::with_capacity(pieces.len());
    for (i, piece) in pieces.iter().enumerate() {
        let piece = piece.as_ref();
        let (surface, glued) = match piece.strip_prefix(CONTINUATION) {
            Some(rest) => (rest, true),
            None => (piece, false),
        };
        if i > 0 && !glued {
            text.push(' ');
            len += 1;
        }
        let start = len;
        text.push_str(surface);
        len += surface.chars().count();
        tokens.push(TokenRecord::new(surface, start, len));
    }
    (text, tokens)
}

/// Known subword splits applied by [`fixture_tokenize`].
const SUBWORD_SPLITS: &[(&str, &[&str])] = &[
    ("retrenchment", &["ret", "rench", "ment"]),
    ("retrenched", &["ret", "rench", "ed"]),
    ("Adjudicating", &["Ad", "jud", "icating"]),
];

/// A small deterministic tokenizer for fixture text.
///
/// Splits on whitespace, then splits every punctuation character into its own
/// token, then applies a fixed table of subword splits. Offsets are character
/// offsets into `text`.
pub fn fixture_tokenize(text: &str) -> Vec<TokenRecord> {
    let chars: Vec<char> = text.chars().collect();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if crate::annotation::is_punctuation_token(&c.to_string()) {
            tokens.push(TokenRecord::new(c.to_string(), i, i + 1));
            i += 1;
        } else {
            let start = i;
            while i < chars.len()
                && !chars[i].is_whitespace()
                && !crate::annotation::is_punctuation_token(&chars[i].to_string())
            {
                i += 1;
            }
            let word: String = chars[start..i].iter().collect();
            match SUBWORD_SPLITS.iter().find(|(w, _)| *w == word) {
                Some((_, parts)) => {
                    let mut pos = start;
                    for p in parts.iter() {
                        let n = p.chars().count();
                        tokens.push(TokenRecord::new(*p, pos, pos + n));
                        pos += n;
                    }
                }
                None => tokens.push(TokenRecord::new(word, start, i)),
            }
        }
    }
    tokens
}

/// Row-stochastic attention in `f64`, `[layer][head][query][key]`, before any
/// narrowing to storage precision.
pub fn fixture_attention_f64(
    config: &FixtureConfig,
    num_tokens: usize,
) -> Result<Vec<f64>, FixtureError> {
    config.check()?;
    if num_tokens == 0 {
        return Err(FixtureError::EmptyTokens);
    }
    let t = num_tokens;
    let d = config.head_dim;
    let mut rng = SplitMix64::new(config.seed);
    let mut draw = |n: usize| -> Vec<f64> {
        (0..n)
            .map(|_| rng.next_centered() * config.weight_scale)
            .collect()
    };

    let embeddings = draw(t * d);
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = Vec::with_capacity(config.num_layers * config.num_heads * t * t);
    for _layer in 0..config.num_layers {
        for _head in 0..config.num_heads {
            let w_q = draw(d * d);
            let w_k = draw(d * d);
            let q = matmul(&embeddings, &w_q, t, d, d);
            let k = matmul(&embeddings, &w_k, t, d, d);
            for row in 0..t {
                let visible = if config.causal { row + 1 } else { t };
                let logits: Vec<f64> = (0..visible)
                    .map(|col| (0..d).map(|i| q[row * d + i] * k[col * d + i]).sum::<f64>() * scale)
                    .collect();
                let probs = softmax(&logits);
                out.extend_from_slice(&probs);
                out.extend(std::iter::repeat_n(0.0, t - visible));
            }
        }
    }
    Ok(out)
}

fn matmul(a: &[f64], b: &[f64], rows: usize, inner: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[r * cols + c] = (0..inner).map(|i| a[r * inner + i] * b[i * cols + c]).sum();
        }
    }
    out
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Builds a fixture run over explicit tokens and their source text.
pub fn generate_run_with_tokens(
    config: &FixtureConfig,
    source_text: String,
    mut tokens: Vec<TokenRecord>,
) -> Result<AttentionRun, FixtureError> {
    if tokens.is_empty() {
        return Err(FixtureError::EmptyTokens);
    }
    if config.bos {
        tokens.insert(0, TokenRecord::special(BOS_TEXT));
    }
    let t = tokens.len();
    let attention = fixture_attention_f64(config, t)?
        .into_iter()
        .map(|v| v as f32)
        .collect();
    Ok(AttentionRun {
        model_id: config.model_id.clone(),
        sequence_id: config.sequence_id.clone(),
        source_text,
        causal: config.causal,
        num_layers: config.num_layers,
        num_heads: config.num_heads,
        num_tokens: t,
        tokens,
        attention,
    })
}

/// Builds a fixture run from word pieces (see [`tokens_from_pieces`]).
pub fn generate_fixture_run<S: AsRef<str>>(
    config: &FixtureConfig,
    pieces: &[S],
) -> Result<AttentionRun, FixtureError> {
    if pieces.is_empty() {
        return Err(FixtureError::EmptyTokens);
    }
    let (text, tokens) = tokens_from_pieces(pieces);
    generate_run_with_tokens(config, text, tokens)
}

/// Builds a fixture run over `text` tokenized with [`fixture_tokenize`].
pub fn generate_fixture_run_for_text(
    config: &FixtureConfig,
    text: &str,
) -> Result<AttentionRun, FixtureError> {
    generate_run_with_tokens(config, text.to_string(), fixture_tokenize(text))
}

/// Copy of `run` where one head's rows shift mass toward `concept` keys.
///
/// Each visible key's logit is taken as `ln p`; concept logits gain `boost`
/// and the row is re-normalized. Masked keys stay exactly zero.
pub fn perturb_run(
    run: &AttentionRun,
    layer: usize,
    head: usize,
    concept: &TokenIndexSet,
    boost: f64,
) -> Result<AttentionRun, FixtureError> {
    if !(boost > 0.0 && boost.is_finite()) {
        return Err(FixtureError::BadBoost(boost));
    }
    if concept.is_empty() {
        return Err(FixtureError::EmptyConcept);
    }
    if layer >= run.num_layers || head >= run.num_heads {
        return Err(FixtureError::OutOfRange { layer, head });
    }
    let t = run.num_tokens;
    let in_concept = concept.mask(t);
    let factor = boost.exp();
    let mut out = run.clone();
    let mut touched = false;
    {
        let m = out.head_mut(layer, head);
        for q in 0..t {
            let visible = run.visible_keys(q);
            let row = &mut m[q * t..q * t + visible];
            if !row
                .iter()
                .enumerate()
                .any(|(k, &p)| in_concept[k] && p > 0.0)
            {
                continue;
            }
            touched = true;
            let weights: Vec<f64> = row
                .iter()
                .enumerate()
                .map(|(k, &p)| {
                    if in_concept[k] {
                        f64::from(p) * factor
                    } else {
                        f64::from(p)
                    }
                })
                .collect();
            let total: f64 = weights.iter().sum();
            for (cell, w) in row.iter_mut().zip(weights) {
                *cell = (w / total) as f32;
            }
        }
    }
    if !touched {
        return Err(FixtureError::ConceptMasked);
    }
    Ok(out)
}
