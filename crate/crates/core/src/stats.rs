//! Shape statistics of flattened delta grids: skewness, kurtosis and
//! equal-width histogram entropy with a Sturges bin count.
//!
//! Moments use the population form `m_k = (1/n) Σ (x - mean)^k`, summed left to
//! right over the input order.

use std::io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{HeadMetricGrid, Pooling};

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("sturges bin count needs at least one value")]
    ZeroCount,
    #[error("need at least {needed} values, got {got}")]
    TooFewValues { needed: usize, got: usize },
    #[error("degenerate distribution: zero variance")]
    Degenerate,
    #[error("number of bins must be at least 1")]
    NoBins,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KurtosisMode {
    /// `m4 / m2²`; a normal distribution scores 3.
    #[default]
    Plain,
    /// Plain minus 3.
    Excess,
}

impl KurtosisMode {
    pub fn as_str(self) -> &'static str {
        match self {
            KurtosisMode::Plain => "plain",
            KurtosisMode::Excess => "excess",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogBase {
    #[default]
    Natural,
    Base2,
}

impl LogBase {
    pub fn as_str(self) -> &'static str {
        match self {
            LogBase::Natural => "e",
            LogBase::Base2 => "2",
        }
    }

    pub fn log(self, x: f64) -> f64 {
        match self {
            LogBase::Natural => x.ln(),
            LogBase::Base2 => x.log2(),
        }
    }
}

/// `ceil(log2 n) + 1`, computed in integer arithmetic.
pub fn sturges_bins(n: usize) -> Result<usize, StatsError> {
    if n == 0 {
        return Err(StatsError::ZeroCount);
    }
    let ceil_log2 = (usize::BITS - (n - 1).leading_zeros()) as usize;
    Ok(ceil_log2 + 1)
}

#[derive(Debug, Clone, Copy)]
struct CentralMoments {
    m2: f64,
    m3: f64,
    m4: f64,
}

fn central_moments(values: &[f64]) -> CentralMoments {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let (mut s2, mut s3, mut s4) = (0.0, 0.0, 0.0);
    for &x in values {
        let d = x - mean;
        let d2 = d * d;
        s2 += d2;
        s3 += d2 * d;
        s4 += d2 * d2;
    }
    CentralMoments {
        m2: s2 / n,
        m3: s3 / n,
        m4: s4 / n,
    }
}

/// Population skewness `m3 / m2^(3/2)`.
pub fn skewness(values: &[f64]) -> Result<f64, StatsError> {
    if values.len() < 3 {
        return Err(StatsError::TooFewValues {
            needed: 3,
            got: values.len(),
        });
    }
    let m = central_moments(values);
    if m.m2 == 0.0 {
        return Err(StatsError::Degenerate);
    }
    Ok(m.m3 / m.m2.powf(1.5))
}

pub fn kurtosis(values: &[f64], mode: KurtosisMode) -> Result<f64, StatsError> {
    if values.len() < 4 {
        return Err(StatsError::TooFewValues {
            needed: 4,
            got: values.len(),
        });
    }
    let m = central_moments(values);
    if m.m2 == 0.0 {
        return Err(StatsError::Degenerate);
    }
    let plain = m.m4 / (m.m2 * m.m2);
    Ok(match mode {
        KurtosisMode::Plain => plain,
        KurtosisMode::Excess => plain - 3.0,
    })
}

/// Bin occupancy over `num_bins` equal-width bins spanning `[min, max]`.
/// The maximum lands in the last bin; a constant sample fills the first.
pub fn histogram_counts(values: &[f64], num_bins: usize) -> Vec<usize> {
    let mut counts = vec![0usize; num_bins];
    if values.is_empty() || num_bins == 0 {
        return counts;
    }
    let (min, max) = min_max(values);
    let width = max - min;
    for &x in values {
        let idx = if width > 0.0 {
            (((x - min) / width) * num_bins as f64).floor() as usize
        } else {
            0
        };
        counts[idx.min(num_bins - 1)] += 1;
    }
    counts
}

fn min_max(values: &[f64]) -> (f64, f64) {
    values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        })
}

/// Shannon entropy of the equal-width histogram, `-Σ p log p` over occupied bins.
pub fn histogram_entropy(
    values: &[f64],
    num_bins: usize,
    base: LogBase,
) -> Result<f64, StatsError> {
    if num_bins == 0 {
        return Err(StatsError::NoBins);
    }
    if values.is_empty() {
        return Err(StatsError::TooFewValues { needed: 1, got: 0 });
    }
    let n = values.len() as f64;
    let mut h = 0.0;
    for &c in histogram_counts(values, num_bins)
        .iter()
        .filter(|&&c| c > 0)
    {
        let p = c as f64 / n;
        h -= p * base.log(p);
    }
    // -0.0 from a single occupied bin
    Ok(h.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SummaryOptions {
    pub kurtosis_mode: KurtosisMode,
    pub log_base: LogBase,
    /// Overrides the Sturges bin count when set.
    pub num_bins: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionSummary {
    pub n: usize,
    /// `None` when the sample has zero variance.
    pub skewness: Option<f64>,
    pub kurtosis: Option<f64>,
    pub kurtosis_mode: KurtosisMode,
    pub entropy: f64,
    pub entropy_log_base: LogBase,
    pub num_bins: usize,
    pub bin_min: f64,
    pub bin_max: f64,
    pub undefined_cells: usize,
}

impl DistributionSummary {
    pub fn is_degenerate(&self) -> bool {
        self.skewness.is_none()
    }
}

pub const MIN_DEFINED_CELLS: usize = 4;

/// Summarizes the defined cells of a grid. Undefined cells are counted, not imputed.
pub fn summarize_distribution(
    grid: &HeadMetricGrid,
    options: &SummaryOptions,
) -> Result<DistributionSummary, StatsError> {
    let values = grid.defined();
    let mut summary = summarize_values(&values, options)?;
    summary.undefined_cells = grid.undefined_count();
    Ok(summary)
}

pub fn summarize_values(
    values: &[f64],
    options: &SummaryOptions,
) -> Result<DistributionSummary, StatsError> {
    if values.len() < MIN_DEFINED_CELLS {
        return Err(StatsError::TooFewValues {
            needed: MIN_DEFINED_CELLS,
            got: values.len(),
        });
    }
    let num_bins = match options.num_bins {
        Some(b) => b,
        None => sturges_bins(values.len())?,
    };
    let (bin_min, bin_max) = min_max(values);
    let degenerate_ok = |r: Result<f64, StatsError>| match r {
        Ok(v) => Ok(Some(v)),
        Err(StatsError::Degenerate) => Ok(None),
        Err(e) => Err(e),
    };
    Ok(DistributionSummary {
        n: values.len(),
        skewness: degenerate_ok(skewness(values))?,
        kurtosis: degenerate_ok(kurtosis(values, options.kurtosis_mode))?,
        kurtosis_mode: options.kurtosis_mode,
        entropy: histogram_entropy(values, num_bins, options.log_base)?,
        entropy_log_base: options.log_base,
        num_bins,
        bin_min,
        bin_max,
        undefined_cells: 0,
    })
}

/// One row of the summary report: one concept, one trained-vs-base pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRecord {
    pub concept: String,
    pub sequence_id: String,
    pub base_model: String,
    pub trained_model: String,
    pub pooling: Pooling,
    pub summary: DistributionSummary,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub const REPORT_CSV_HEADER: [&str; 16] = [
    "concept",
    "sequence_id",
    "base_model",
    "trained_model",
    "pooling",
    "n",
    "undefined_cells",
    "skewness",
    "kurtosis",
    "kurtosis_mode",
    "entropy",
    "entropy_log_base",
    "num_bins",
    "bin_min",
    "bin_max",
    "degenerate",
];

pub fn write_report_csv<W: io::Write>(
    records: &[SummaryRecord],
    writer: W,
) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(REPORT_CSV_HEADER)?;
    for r in records {
        let s = &r.summary;
        w.write_record([
            r.concept.clone(),
            r.sequence_id.clone(),
            r.base_model.clone(),
            r.trained_model.clone(),
            r.pooling.as_str().to_string(),
            s.n.to_string(),
            s.undefined_cells.to_string(),
            fmt_opt(s.skewness),
            fmt_opt(s.kurtosis),
            s.kurtosis_mode.as_str().to_string(),
            s.entropy.to_string(),
            s.entropy_log_base.as_str().to_string(),
            s.num_bins.to_string(),
            s.bin_min.to_string(),
            s.bin_max.to_string(),
            s.is_degenerate().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct ReportDocument<'a> {
    pooling: &'a str,
    kurtosis_mode: &'a str,
    entropy_log_base: &'a str,
    trained_models: Vec<&'a str>,
    records: &'a [SummaryRecord],
}

/// JSON report: run-wide modes up front, then one record per concept and pair.
pub fn report_json(
    records: &[SummaryRecord],
    pooling: Pooling,
    options: &SummaryOptions,
) -> String {
    let doc = ReportDocument {
        pooling: pooling.as_str(),
        kurtosis_mode: options.kurtosis_mode.as_str(),
        entropy_log_base: options.log_base.as_str(),
        trained_models: trained_order(records),
        records,
    };
    let mut s = serde_json::to_string_pretty(&doc).expect("report serializes");
    s.push('\n');
    s
}

fn trained_order(records: &[SummaryRecord]) -> Vec<&str> {
    let mut order: Vec<&str> = Vec::new();
    for r in records {
        if !order.contains(&r.trained_model.as_str()) {
            order.push(&r.trained_model);
        }
    }
    order
}

/// Wide text table: one row per concept, and for each of Skewness, Kurtosis
/// and Entropy one sub-column per trained model.
pub fn render_table(records: &[SummaryRecord]) -> String {
    let models = trained_order(records);
    let mut concepts: Vec<&str> = Vec::new();
    for r in records {
        if !concepts.contains(&r.concept.as_str()) {
            concepts.push(&r.concept);
        }
    }
    let modes = records
        .first()
        .map(|r| {
            format!(
                "pooling={} kurtosis={} entropy_base={} bins={} n={}",
                r.pooling.as_str(),
                r.summary.kurtosis_mode.as_str(),
                r.summary.entropy_log_base.as_str(),
                r.summary.num_bins,
                r.summary.n
            )
        })
        .unwrap_or_default();

    let mut out = String::new();
    out.push_str(&format!("# {modes}\n"));
    let mut header = vec!["Concept".to_string()];
    for stat in ["Skewness", "Kurtosis", "Entropy"] {
        for m in &models {
            header.push(format!("{stat} [{m}]"));
        }
    }
    out.push_str(&format!("| {} |\n", header.join(" | ")));
    out.push_str(&format!("|{}\n", "---|".repeat(header.len())));
    for c in &concepts {
        let mut row = vec![c.to_string()];
        let find = |m: &str| {
            records
                .iter()
                .find(|r| r.concept == *c && r.trained_model == m)
        };
        for pick in 0..3 {
            for m in &models {
                let cell = find(m).map(|r| {
                    let s = &r.summary;
                    match pick {
                        0 => s
                            .skewness
                            .map(|v| format!("{v:+.2}"))
                            .unwrap_or_else(|| "n/a".into()),
                        1 => s
                            .kurtosis
                            .map(|v| format!("{v:.2}"))
                            .unwrap_or_else(|| "n/a".into()),
                        _ => format!("{:.2}", s.entropy),
                    }
                });
                row.push(cell.unwrap_or_default());
            }
        }
        out.push_str(&format!("| {} |\n", row.join(" | ")));
    }
    out
}
