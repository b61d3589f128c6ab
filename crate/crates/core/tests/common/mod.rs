//! Independent reference implementations used only by tests.
//!
//! Nothing here calls into the library's numeric paths; each function is a
//! direct transcription of the definition with explicit loops.

#![allow(dead_code, clippy::needless_range_loop)]

use std::collections::BTreeSet;

use concept_attention::tensor_store::{AttentionRun, TokenRecord};

/// splitmix64 written out from the published recurrence.
pub struct OracleRng(pub u64);

impl OracleRng {
    pub fn next(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E3779B97F4A7C15);
        let mut z = self.0;
        z ^= z >> 30;
        z = z.wrapping_mul(0xBF58476D1CE4E5B9);
        z ^= z >> 27;
        z = z.wrapping_mul(0x94D049BB133111EB);
        z ^ (z >> 31)
    }

    pub fn uniform_centered(&mut self) -> f64 {
        let top53 = self.next() >> 11;
        top53 as f64 / 9007199254740992.0 - 0.5
    }
}

/// Fixture attention in f64 via explicit Q, K, logits and an unshifted softmax.
pub fn oracle_fixture_attention(
    layers: usize,
    heads: usize,
    d: usize,
    t: usize,
    seed: u64,
    causal: bool,
    scale: f64,
) -> Vec<f64> {
    let mut rng = OracleRng(seed);
    let mut emb = vec![vec![0.0; d]; t];
    for row in emb.iter_mut() {
        for x in row.iter_mut() {
            *x = rng.uniform_centered() * scale;
        }
    }
    let mut out = Vec::new();
    for _ in 0..layers {
        for _ in 0..heads {
            let mut wq = vec![vec![0.0; d]; d];
            for row in wq.iter_mut() {
                for x in row.iter_mut() {
                    *x = rng.uniform_centered() * scale;
                }
            }
            let mut wk = vec![vec![0.0; d]; d];
            for row in wk.iter_mut() {
                for x in row.iter_mut() {
                    *x = rng.uniform_centered() * scale;
                }
            }
            let mut q = vec![vec![0.0; d]; t];
            let mut k = vec![vec![0.0; d]; t];
            for p in 0..t {
                for j in 0..d {
                    for i in 0..d {
                        q[p][j] += emb[p][i] * wq[i][j];
                        k[p][j] += emb[p][i] * wk[i][j];
                    }
                }
            }
            for qi in 0..t {
                let mut row = vec![0.0; t];
                let mut total = 0.0;
                for ki in 0..t {
                    if causal && ki > qi {
                        continue;
                    }
                    let mut dot = 0.0;
                    for j in 0..d {
                        dot += q[qi][j] * k[ki][j];
                    }
                    let e = (dot / (d as f64).sqrt()).exp();
                    row[ki] = e;
                    total += e;
                }
                for x in row.iter_mut() {
                    *x /= total;
                }
                out.extend(row);
            }
        }
    }
    out
}

/// Pooled concept proportion by exhaustive double loop.
pub fn oracle_proportion(
    m: &[f32],
    t: usize,
    concept: &BTreeSet<usize>,
    filter: &BTreeSet<usize>,
) -> Option<f64> {
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for q in 0..t {
        for k in 0..t {
            let a = m[q * t + k] as f64;
            if filter.contains(&k) {
                continue;
            }
            den += a;
            if concept.contains(&k) {
                num += a;
            }
        }
    }
    if den > 0.0 {
        Some(num / den)
    } else {
        None
    }
}

/// Population moments by two explicit passes with `powi`.
pub fn oracle_moments(x: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mut mean = 0.0;
    for v in x {
        mean += v;
    }
    mean /= n;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for v in x {
        m2 += (v - mean).powi(2);
        m3 += (v - mean).powi(3);
        m4 += (v - mean).powi(4);
    }
    (m2 / n, m3 / n, m4 / n)
}

pub fn oracle_skewness(x: &[f64]) -> f64 {
    let (m2, m3, _) = oracle_moments(x);
    m3 / m2.powf(1.5)
}

pub fn oracle_kurtosis(x: &[f64]) -> f64 {
    let (m2, _, m4) = oracle_moments(x);
    m4 / (m2 * m2)
}

/// Rounds an f32 to the nearest value with a 10-bit mantissa (half precision
/// for normal numbers), ties to even.
pub fn round_to_half_mantissa(v: f32) -> f32 {
    if v == 0.0 || !v.is_finite() {
        return v;
    }
    let bits = v.to_bits();
    let drop = 13;
    let mask = (1u32 << drop) - 1;
    let rem = bits & mask;
    let mut base = bits & !mask;
    let half = 1u32 << (drop - 1);
    if rem > half || (rem == half && (base >> drop) & 1 == 1) {
        base += 1 << drop;
    }
    f32::from_bits(base)
}

/// A run with hand-set tokens `w0 w1 ...` and caller-provided attention.
pub fn plain_run(
    layers: usize,
    heads: usize,
    t: usize,
    causal: bool,
    attention: Vec<f32>,
) -> AttentionRun {
    let words: Vec<String> = (0..t).map(|i| format!("w{i}")).collect();
    let text = words.join(" ");
    let mut tokens = Vec::new();
    let mut pos = 0;
    for w in &words {
        tokens.push(TokenRecord::new(w.clone(), pos, pos + w.len()));
        pos += w.len() + 1;
    }
    AttentionRun {
        model_id: "plain".into(),
        sequence_id: "plain".into(),
        source_text: text,
        causal,
        num_layers: layers,
        num_heads: heads,
        num_tokens: t,
        tokens,
        attention,
    }
}

/// Inverse standard-normal CDF (Acklam's rational approximation, |error| < 1.2e-9).
pub fn inverse_normal_cdf(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.38357751867269e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549671010366687e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    let lo = 0.02425;
    if p < lo {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - lo {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    }
}

/// `n` deterministic pseudo-normal draws from splitmix64 and the inverse CDF.
pub fn pseudo_normal(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = OracleRng(seed);
    (0..n)
        .map(|_| {
            // open interval (0, 1)
            let u = ((rng.next() >> 11) as f64 + 0.5) / 9007199254740992.0;
            inverse_normal_cdf(u)
        })
        .collect()
}
