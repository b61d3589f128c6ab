//! Run bundles: one model's attention tensor for one sequence, plus token
//! metadata, stored as `manifest.json` next to a raw `attn.bin` blob.
//!
//! The blob is little-endian `f32`, row-major over `[layer, head, query, key]`.
//! Offsets in [`TokenRecord`] count Unicode scalar values of `source_text`.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "attn.bin";
pub const DTYPE_F32: &str = "f32";
pub const LAYOUT: &str = "LHQK_row_major";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("empty sequence")]
    EmptySequence,
    #[error("invalid dimensions: {0}")]
    InvalidDimensions(String),
    #[error("token {index}: {reason}")]
    InvalidToken { index: usize, reason: String },
    #[error("non-finite attention value at flat index {0}")]
    NonFinite(usize),
    #[error("blob size mismatch: expected {expected} bytes, found {found}")]
    BlobSizeMismatch { expected: u64, found: u64 },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("unsupported dtype {0:?}")]
    UnsupportedDtype(String),
    #[error("unsupported layout {0:?}")]
    UnsupportedLayout(String),
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("malformed manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub text: String,
    pub char_start: usize,
    pub char_end: usize,
    pub is_special: bool,
}

impl TokenRecord {
    pub fn new(text: impl Into<String>, char_start: usize, char_end: usize) -> Self {
        Self {
            text: text.into(),
            char_start,
            char_end,
            is_special: false,
        }
    }

    /// A zero-width special token such as a start-of-sequence marker.
    pub fn special(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            char_start: 0,
            char_end: 0,
            is_special: true,
        }
    }
}

/// Attention weights of one model on one sequence.
///
/// `attention` holds `L·H·T·T` values in `[layer][head][query][key]` order.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRun {
    pub model_id: String,
    pub sequence_id: String,
    pub source_text: String,
    pub causal: bool,
    pub num_layers: usize,
    pub num_heads: usize,
    pub num_tokens: usize,
    pub tokens: Vec<TokenRecord>,
    pub attention: Vec<f32>,
}

impl AttentionRun {
    pub fn head_len(&self) -> usize {
        self.num_tokens * self.num_tokens
    }

    /// The `T×T` matrix of one head, row-major by query.
    pub fn head(&self, layer: usize, head: usize) -> &[f32] {
        let n = self.head_len();
        let start = (layer * self.num_heads + head) * n;
        &self.attention[start..start + n]
    }

    pub fn head_mut(&mut self, layer: usize, head: usize) -> &mut [f32] {
        let n = self.head_len();
        let start = (layer * self.num_heads + head) * n;
        &mut self.attention[start..start + n]
    }

    pub fn at(&self, layer: usize, head: usize, query: usize, key: usize) -> f32 {
        self.head(layer, head)[query * self.num_tokens + key]
    }

    /// Number of keys visible from `query`: `query + 1` for causal runs.
    pub fn visible_keys(&self, query: usize) -> usize {
        if self.causal {
            query + 1
        } else {
            self.num_tokens
        }
    }

    pub fn token_texts(&self) -> Vec<&str> {
        self.tokens.iter().map(|t| t.text.as_str()).collect()
    }

    /// Structural checks that must hold before a run can be serialized:
    /// dimensions, token count, token offsets and finiteness.
    pub fn check_structure(&self) -> Result<(), StoreError> {
        if self.num_tokens == 0 || self.tokens.is_empty() {
            return Err(StoreError::EmptySequence);
        }
        if self.num_layers == 0 || self.num_heads == 0 {
            return Err(StoreError::InvalidDimensions(format!(
                "num_layers={} num_heads={} must both be at least 1",
                self.num_layers, self.num_heads
            )));
        }
        if self.tokens.len() != self.num_tokens {
            return Err(StoreError::InvalidDimensions(format!(
                "{} token records for num_tokens={}",
                self.tokens.len(),
                self.num_tokens
            )));
        }
        let expected = self.num_layers * self.num_heads * self.head_len();
        if self.attention.len() != expected {
            return Err(StoreError::InvalidDimensions(format!(
                "attention has {} values, expected {}",
                self.attention.len(),
                expected
            )));
        }
        if let Some((index, reason)) = token_order_violations(&self.tokens, &self.source_text)
            .into_iter()
            .next()
        {
            return Err(StoreError::InvalidToken { index, reason });
        }
        if let Some(i) = self.attention.iter().position(|v| !v.is_finite()) {
            return Err(StoreError::NonFinite(i));
        }
        Ok(())
    }
}

/// Why two runs cannot be compared position-by-position, if they cannot.
///
/// Runs are comparable when they share dimensions, masking, source text and
/// token surface forms.
pub fn incomparability(a: &AttentionRun, b: &AttentionRun) -> Option<String> {
    if (a.num_layers, a.num_heads, a.num_tokens) != (b.num_layers, b.num_heads, b.num_tokens) {
        return Some(format!(
            "dimensions differ: {}x{}x{} vs {}x{}x{}",
            a.num_layers, a.num_heads, a.num_tokens, b.num_layers, b.num_heads, b.num_tokens
        ));
    }
    if a.causal != b.causal {
        return Some("causal flags differ".to_string());
    }
    if a.source_text != b.source_text {
        return Some("source texts differ".to_string());
    }
    if let Some(i) = a
        .tokens
        .iter()
        .zip(&b.tokens)
        .position(|(x, y)| x.text != y.text)
    {
        return Some(format!(
            "token {i} differs: {:?} vs {:?}",
            a.tokens[i].text, b.tokens[i].text
        ));
    }
    None
}

/// Offset problems in a token list, as `(index, reason)` pairs.
fn token_order_violations(tokens: &[TokenRecord], source_text: &str) -> Vec<(usize, String)> {
    let text_len = source_text.chars().count();
    let mut out = Vec::new();
    let mut prev_end: Option<usize> = None;
    for (i, tok) in tokens.iter().enumerate() {
        if tok.char_end < tok.char_start {
            out.push((
                i,
                format!(
                    "char_end {} before char_start {}",
                    tok.char_end, tok.char_start
                ),
            ));
            continue;
        }
        if tok.is_special {
            continue;
        }
        if tok.char_end > text_len {
            out.push((
                i,
                format!("char_end {} beyond text length {}", tok.char_end, text_len),
            ));
        }
        if let Some(end) = prev_end {
            if tok.char_start < end {
                out.push((
                    i,
                    format!(
                        "char_start {} overlaps previous token ending at {}",
                        tok.char_start, end
                    ),
                ));
            }
        }
        prev_end = Some(tok.char_end);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub model_id: String,
    pub sequence_id: String,
    pub num_layers: usize,
    pub num_heads: usize,
    pub num_tokens: usize,
    pub dtype: String,
    pub layout: String,
    pub causal: bool,
    pub blob: String,
    pub source_text: String,
    pub tokens: Vec<TokenRecord>,
}

impl Manifest {
    fn for_run(run: &AttentionRun) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            model_id: run.model_id.clone(),
            sequence_id: run.sequence_id.clone(),
            num_layers: run.num_layers,
            num_heads: run.num_heads,
            num_tokens: run.num_tokens,
            dtype: DTYPE_F32.to_string(),
            layout: LAYOUT.to_string(),
            causal: run.causal,
            blob: BLOB_FILE.to_string(),
            source_text: run.source_text.clone(),
            tokens: run.tokens.clone(),
        }
    }

    pub fn expected_blob_bytes(&self) -> u64 {
        (self.num_layers as u64) * (self.num_heads as u64) * (self.num_tokens as u64).pow(2) * 4
    }
}

pub fn encode_blob(values: &[f32]) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes
}

pub fn decode_blob(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

/// Writes `manifest.json` and `attn.bin` into `destination`, creating it if needed.
pub fn write_run(run: &AttentionRun, destination: &Path) -> Result<(), StoreError> {
    run.check_structure()?;
    fs::create_dir_all(destination)?;
    let manifest = Manifest::for_run(run);
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    fs::write(destination.join(MANIFEST_FILE), json)?;
    let mut blob = fs::File::create(destination.join(BLOB_FILE))?;
    blob.write_all(&encode_blob(&run.attention))?;
    blob.sync_all()?;
    Ok(())
}

pub fn read_manifest(source: &Path) -> Result<Manifest, StoreError> {
    let path = source.join(MANIFEST_FILE);
    if !path.is_file() {
        return Err(StoreError::MissingFile(path));
    }
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&path)?)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(StoreError::UnsupportedVersion(manifest.format_version));
    }
    if manifest.dtype != DTYPE_F32 {
        return Err(StoreError::UnsupportedDtype(manifest.dtype));
    }
    if manifest.layout != LAYOUT {
        return Err(StoreError::UnsupportedLayout(manifest.layout));
    }
    Ok(manifest)
}

pub fn read_run(source: &Path) -> Result<AttentionRun, StoreError> {
    let manifest = read_manifest(source)?;
    let blob_path = source.join(&manifest.blob);
    if !blob_path.is_file() {
        return Err(StoreError::MissingFile(blob_path));
    }
    let bytes = fs::read(&blob_path)?;
    let expected = manifest.expected_blob_bytes();
    if bytes.len() as u64 != expected {
        return Err(StoreError::BlobSizeMismatch {
            expected,
            found: bytes.len() as u64,
        });
    }
    let attention = decode_blob(&bytes);
    if let Some(i) = attention.iter().position(|v| !v.is_finite()) {
        return Err(StoreError::NonFinite(i));
    }
    let run = AttentionRun {
        model_id: manifest.model_id,
        sequence_id: manifest.sequence_id,
        source_text: manifest.source_text,
        causal: manifest.causal,
        num_layers: manifest.num_layers,
        num_heads: manifest.num_heads,
        num_tokens: manifest.num_tokens,
        tokens: manifest.tokens,
        attention,
    };
    run.check_structure()?;
    Ok(run)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    RowSum {
        layer: usize,
        head: usize,
        query: usize,
        sum: f64,
    },
    NegativeAttention {
        layer: usize,
        head: usize,
        query: usize,
        key: usize,
        value: f32,
    },
    MaskedNonZero {
        layer: usize,
        head: usize,
        query: usize,
        key: usize,
        value: f32,
    },
    TokenOffset {
        index: usize,
        reason: String,
    },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::RowSum {
                layer,
                head,
                query,
                sum,
            } => {
                write!(
                    f,
                    "row sum {sum} at layer {layer} head {head} query {query}"
                )
            }
            Violation::NegativeAttention {
                layer,
                head,
                query,
                key,
                value,
            } => {
                write!(f, "negative attention {value} at layer {layer} head {head} query {query} key {key}")
            }
            Violation::MaskedNonZero {
                layer,
                head,
                query,
                key,
                value,
            } => {
                write!(f, "masked entry {value} is not zero at layer {layer} head {head} query {query} key {key}")
            }
            Violation::TokenOffset { index, reason } => write!(f, "token {index}: {reason}"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks row-stochasticity, sign, causal masking and token offsets.
///
/// The run must be structurally sound (see [`AttentionRun::check_structure`]);
/// value-level problems are reported, never raised.
pub fn validate_run(run: &AttentionRun, row_sum_tolerance: f64) -> ValidationReport {
    let mut violations = Vec::new();
    let t = run.num_tokens;
    for layer in 0..run.num_layers {
        for head in 0..run.num_heads {
            let m = run.head(layer, head);
            for query in 0..t {
                let row = &m[query * t..(query + 1) * t];
                let visible = run.visible_keys(query);
                let mut sum = 0.0f64;
                for (key, &value) in row.iter().enumerate() {
                    if key < visible {
                        sum += f64::from(value);
                    } else if value != 0.0 {
                        violations.push(Violation::MaskedNonZero {
                            layer,
                            head,
                            query,
                            key,
                            value,
                        });
                    }
                    if value < 0.0 {
                        violations.push(Violation::NegativeAttention {
                            layer,
                            head,
                            query,
                            key,
                            value,
                        });
                    }
                }
                if (sum - 1.0).abs() > row_sum_tolerance {
                    violations.push(Violation::RowSum {
                        layer,
                        head,
                        query,
                        sum,
                    });
                }
            }
        }
    }
    for (index, reason) in token_order_violations(&run.tokens, &run.source_text) {
        violations.push(Violation::TokenOffset { index, reason });
    }
    ValidationReport { violations }
}

/// Whether `dir` looks like a run bundle.
pub fn is_bundle(dir: &Path) -> bool {
    dir.join(MANIFEST_FILE).is_file()
}

/// Bundle directories at or below `root`, sorted by path.
pub fn find_bundles(root: &Path) -> io::Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        if is_bundle(&dir) {
            found.push(dir);
            continue;
        }
        for entry in fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            }
        }
    }
    found.sort();
    Ok(found)
}
