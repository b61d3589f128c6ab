//! Measure how much attention transformer heads direct at annotated concept
//! spans, and how that changes between a base model and trained variants.
//!
//! The pipeline runs on serialized attention bundles ([`tensor_store`]):
//! concept spans are aligned to tokens ([`annotation`]), per-head proportions
//! and deltas are computed ([`metrics`]), delta distributions are summarized
//! ([`stats`]), single heads are diffed ([`diff`]) and figures are emitted as
//! SVG with CSV sidecars ([`render`]). [`fixture`] generates small synthetic
//! runs so every stage can be tested without a real model.

pub mod annotation;
pub mod cli;
pub mod diff;
pub mod fixture;
pub mod metrics;
pub mod pipeline;
pub mod render;
pub mod stats;
pub mod tensor_store;

pub use annotation::{ConceptAnnotation, TokenIndexSet};
pub use metrics::{HeadMetricGrid, Pooling};
pub use stats::DistributionSummary;
pub use tensor_store::{AttentionRun, TokenRecord};
