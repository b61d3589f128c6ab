//! Per-head concept proportions, layer means and base/trained deltas.
//!
//! A head's concept proportion is the share of its attention mass that lands
//! on concept keys once filtered keys (specials, punctuation) are removed from
//! both numerator and denominator. Filtering applies to keys only; every
//! query row contributes.

use std::io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::TokenIndexSet;
use crate::tensor_store::AttentionRun;

pub const CONCEPT_PROPORTION: &str = "concept_proportion";

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("grid dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("metric names differ: {0:?} vs {1:?}")]
    MetricMismatch(String, String),
    #[error("runs not comparable: {0}")]
    NotComparable(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// How query rows are combined into one proportion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    /// One ratio of grand sums over all query rows.
    #[default]
    Pooled,
    /// Mean of per-row ratios; rows whose unfiltered mass is zero are skipped.
    PerQuery,
}

impl Pooling {
    pub fn as_str(self) -> &'static str {
        match self {
            Pooling::Pooled => "pooled",
            Pooling::PerQuery => "per-query",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadMetricGrid {
    pub num_layers: usize,
    pub num_heads: usize,
    /// Row-major by layer; `None` marks an undefined cell.
    pub values: Vec<Option<f64>>,
    pub metric_name: String,
    pub model_ids: Vec<String>,
}

impl HeadMetricGrid {
    pub fn new(
        num_layers: usize,
        num_heads: usize,
        metric_name: impl Into<String>,
        model_ids: Vec<String>,
    ) -> Self {
        Self {
            num_layers,
            num_heads,
            values: vec![None; num_layers * num_heads],
            metric_name: metric_name.into(),
            model_ids,
        }
    }

    pub fn get(&self, layer: usize, head: usize) -> Option<f64> {
        self.values[layer * self.num_heads + head]
    }

    pub fn set(&mut self, layer: usize, head: usize, value: Option<f64>) {
        self.values[layer * self.num_heads + head] = value;
    }

    /// Defined cells in row-major order.
    pub fn defined(&self) -> Vec<f64> {
        self.values.iter().flatten().copied().collect()
    }

    pub fn undefined_count(&self) -> usize {
        self.values.iter().filter(|v| v.is_none()).count()
    }

    /// Writes `layer,head,value` rows; undefined cells leave `value` empty.
    pub fn write_csv<W: io::Write>(&self, writer: W) -> Result<(), MetricsError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["layer", "head", "value"])?;
        for layer in 0..self.num_layers {
            for head in 0..self.num_heads {
                let value = self
                    .get(layer, head)
                    .map(|v| v.to_string())
                    .unwrap_or_default();
                w.write_record([layer.to_string(), head.to_string(), value])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Concept proportion of one `T×T` head matrix (row-major by query).
///
/// Returns `None` when no attention mass falls on unfiltered keys.
pub fn head_concept_proportion(
    head_matrix: &[f32],
    num_tokens: usize,
    concept: &TokenIndexSet,
    filter: &TokenIndexSet,
    pooling: Pooling,
) -> Option<f64> {
    let t = num_tokens;
    debug_assert_eq!(head_matrix.len(), t * t);
    let in_concept = concept.mask(t);
    let filtered = filter.mask(t);

    let mut numerator = 0.0f64;
    let mut denominator = 0.0f64;
    let mut ratio_sum = 0.0f64;
    let mut rows = 0usize;
    for q in 0..t {
        let row = &head_matrix[q * t..(q + 1) * t];
        let mut row_num = 0.0f64;
        let mut row_den = 0.0f64;
        for (k, &a) in row.iter().enumerate() {
            if filtered[k] {
                continue;
            }
            let a = f64::from(a);
            row_den += a;
            if in_concept[k] {
                row_num += a;
            }
        }
        numerator += row_num;
        denominator += row_den;
        if row_den > 0.0 {
            ratio_sum += row_num / row_den;
            rows += 1;
        }
    }
    match pooling {
        Pooling::Pooled if denominator > 0.0 => Some(numerator / denominator),
        Pooling::PerQuery if rows > 0 => Some(ratio_sum / rows as f64),
        _ => None,
    }
}

/// Concept proportion of every head in a run.
pub fn run_proportions(
    run: &AttentionRun,
    concept: &TokenIndexSet,
    filter: &TokenIndexSet,
    pooling: Pooling,
) -> HeadMetricGrid {
    let mut grid = HeadMetricGrid::new(
        run.num_layers,
        run.num_heads,
        CONCEPT_PROPORTION,
        vec![run.model_id.clone()],
    );
    for layer in 0..run.num_layers {
        for head in 0..run.num_heads {
            let p = head_concept_proportion(
                run.head(layer, head),
                run.num_tokens,
                concept,
                filter,
                pooling,
            );
            grid.set(layer, head, p);
        }
    }
    grid
}

/// Cell-wise `trained - base`. Undefined on either side stays undefined.
pub fn grid_delta(
    trained: &HeadMetricGrid,
    base: &HeadMetricGrid,
) -> Result<HeadMetricGrid, MetricsError> {
    if (trained.num_layers, trained.num_heads) != (base.num_layers, base.num_heads) {
        return Err(MetricsError::DimensionMismatch(
            trained.num_layers,
            trained.num_heads,
            base.num_layers,
            base.num_heads,
        ));
    }
    if trained.metric_name != base.metric_name {
        return Err(MetricsError::MetricMismatch(
            trained.metric_name.clone(),
            base.metric_name.clone(),
        ));
    }
    let values = trained
        .values
        .iter()
        .zip(&base.values)
        .map(|(t, b)| match (t, b) {
            (Some(t), Some(b)) => Some(t - b),
            _ => None,
        })
        .collect();
    Ok(HeadMetricGrid {
        num_layers: trained.num_layers,
        num_heads: trained.num_heads,
        values,
        metric_name: format!("{}_delta", trained.metric_name),
        model_ids: vec![
            trained.model_ids.first().cloned().unwrap_or_default(),
            base.model_ids.first().cloned().unwrap_or_default(),
        ],
    })
}

/// Proportion grids of two comparable runs and their delta.
pub fn run_pair_delta(
    trained: &AttentionRun,
    base: &AttentionRun,
    concept: &TokenIndexSet,
    filter: &TokenIndexSet,
    pooling: Pooling,
) -> Result<(HeadMetricGrid, HeadMetricGrid, HeadMetricGrid), MetricsError> {
    if let Some(why) = crate::tensor_store::incomparability(trained, base) {
        return Err(MetricsError::NotComparable(why));
    }
    let t = run_proportions(trained, concept, filter, pooling);
    let b = run_proportions(base, concept, filter, pooling);
    let d = grid_delta(&t, &b)?;
    Ok((t, b, d))
}

/// Mean of the defined cells of each layer; `None` for a layer with none.
pub fn layer_means(grid: &HeadMetricGrid) -> Vec<Option<f64>> {
    (0..grid.num_layers)
        .map(|layer| {
            let cells: Vec<f64> = (0..grid.num_heads)
                .filter_map(|h| grid.get(layer, h))
                .collect();
            if cells.is_empty() {
                None
            } else {
                Some(cells.iter().sum::<f64>() / cells.len() as f64)
            }
        })
        .collect()
}
