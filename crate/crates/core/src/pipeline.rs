//! The four end-to-end commands: validate, analyze, diff and fixtures.
//!
//! Each command reads its inputs, writes machine outputs only under its output
//! directory, and logs progress to standard error.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::annotation::{
    align_concept, annotations_to_json, classify_filter_tokens, parse_annotations, AnnotationError,
    ConceptAnnotation, CONCEPT_CORPUS,
};
use crate::diff::{
    concept_fragment_coverage, raw_attention_diff, top_relation_changes, write_relations_csv,
    DiffError,
};
use crate::fixture::{
    generate_fixture_run_for_text, generate_run_with_tokens, perturb_run, tokens_from_pieces,
    FixtureConfig, FixtureError,
};
use crate::metrics::{
    layer_means, run_pair_delta, run_proportions, HeadMetricGrid, MetricsError, Pooling,
};
use crate::render::{
    render_heatmap, render_layer_profile, ColorScale, HeatmapSpec, RenderError, Series,
};
use crate::stats::{
    render_table, report_json, summarize_distribution, write_report_csv, SummaryOptions,
    SummaryRecord,
};
use crate::tensor_store::{
    find_bundles, read_run, validate_run, write_run, AttentionRun, StoreError, ValidationReport,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    /// Bad flags or arguments; exit code 2.
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Annotation(#[from] AnnotationError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Fixture(#[from] FixtureError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl PipelineError {
    pub fn exit_code(&self) -> u8 {
        match self {
            PipelineError::Usage(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;

/// File-name-safe form of a label or model id.
pub fn slug(s: &str) -> String {
    let mut out: String = s
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '.' {
                c.to_ascii_lowercase()
            } else {
                '_'
            }
        })
        .collect();
    if out.is_empty() {
        out.push('_');
    }
    out
}

/// Reads one bundle, or every bundle below a directory.
pub fn load_runs(path: &Path) -> Result<Vec<AttentionRun>> {
    if !path.exists() {
        return Err(PipelineError::Usage(format!(
            "{} does not exist",
            path.display()
        )));
    }
    let dirs = find_bundles(path)?;
    if dirs.is_empty() {
        return Err(PipelineError::Data(format!(
            "no run bundles found under {}",
            path.display()
        )));
    }
    dirs.iter()
        .map(|d| read_run(d).map_err(PipelineError::from))
        .collect()
}

fn by_sequence(runs: Vec<AttentionRun>, origin: &Path) -> Result<BTreeMap<String, AttentionRun>> {
    let mut map = BTreeMap::new();
    for run in runs {
        let id = run.sequence_id.clone();
        if map.insert(id.clone(), run).is_some() {
            return Err(PipelineError::Data(format!(
                "sequence {id} appears twice under {}",
                origin.display()
            )));
        }
    }
    Ok(map)
}

// ---------------------------------------------------------------------------
// validate
// ---------------------------------------------------------------------------

pub fn cmd_validate(bundle: &Path, row_sum_tolerance: f64) -> Result<ValidationReport> {
    let run = read_run(bundle)?;
    Ok(validate_run(&run, row_sum_tolerance))
}

// ---------------------------------------------------------------------------
// analyze
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct AnalysisJob {
    pub base: PathBuf,
    pub trained: Vec<PathBuf>,
    pub annotations: PathBuf,
    /// Restrict to these concept labels; empty means all.
    pub concepts: Vec<String>,
    pub out: PathBuf,
    pub pooling: Pooling,
    pub summary: SummaryOptions,
    pub row_sum_tolerance: f64,
}

#[derive(Debug, Clone)]
pub struct AnalysisOutput {
    pub records: Vec<SummaryRecord>,
    pub files: Vec<PathBuf>,
}

fn check_run(run: &AttentionRun, tol: f64) -> Result<()> {
    let report = validate_run(run, tol);
    if let Some(v) = report.violations.first() {
        return Err(PipelineError::Data(format!(
            "{} / {} fails validation at tolerance {tol} ({} violations, first: {v})",
            run.model_id,
            run.sequence_id,
            report.violations.len()
        )));
    }
    Ok(())
}

/// Concept labels of one sequence in first-seen order with their spans.
fn concepts_of<'a>(
    anns: &'a [ConceptAnnotation],
    sequence_id: &str,
) -> Vec<(String, Vec<&'a ConceptAnnotation>)> {
    let mut out: Vec<(String, Vec<&ConceptAnnotation>)> = Vec::new();
    for a in anns.iter().filter(|a| a.sequence_id == sequence_id) {
        match out.iter_mut().find(|(l, _)| *l == a.label) {
            Some((_, v)) => v.push(a),
            None => out.push((a.label.clone(), vec![a])),
        }
    }
    out
}

fn write_grid(grid: &HeadMetricGrid, path: &Path, files: &mut Vec<PathBuf>) -> Result<()> {
    let mut buf = Vec::new();
    grid.write_csv(&mut buf)?;
    fs::write(path, buf)?;
    files.push(path.to_path_buf());
    Ok(())
}

pub fn cmd_analyze(job: &AnalysisJob) -> Result<AnalysisOutput> {
    if job.trained.is_empty() {
        return Err(PipelineError::Usage(
            "at least one --trained run is required".into(),
        ));
    }
    let anns = parse_annotations(&fs::read_to_string(&job.annotations).map_err(|e| {
        PipelineError::Usage(format!(
            "cannot read annotations {}: {e}",
            job.annotations.display()
        ))
    })?)?;
    for label in &job.concepts {
        if !anns.iter().any(|a| &a.label == label) {
            return Err(PipelineError::Data(format!(
                "concept label {label:?} not found in annotations"
            )));
        }
    }

    let base = by_sequence(load_runs(&job.base)?, &job.base)?;
    let trained: Vec<BTreeMap<String, AttentionRun>> = job
        .trained
        .iter()
        .map(|p| load_runs(p).and_then(|r| by_sequence(r, p)))
        .collect::<Result<_>>()?;
    for run in base.values().chain(trained.iter().flat_map(|m| m.values())) {
        check_run(run, job.row_sum_tolerance)?;
    }

    let mut sequence_order: Vec<&str> = Vec::new();
    for a in &anns {
        if !sequence_order.contains(&a.sequence_id.as_str()) {
            sequence_order.push(&a.sequence_id);
        }
    }

    fs::create_dir_all(&job.out)?;
    let mut records = Vec::new();
    let mut files = Vec::new();
    for seq in sequence_order {
        let Some(base_run) = base.get(seq) else {
            warn!("no base run for sequence {seq}; skipping");
            continue;
        };
        let filter = classify_filter_tokens(base_run);
        for (label, spans) in concepts_of(&anns, seq) {
            if !job.concepts.is_empty() && !job.concepts.contains(&label) {
                continue;
            }
            let concept = align_concept(base_run, &spans)?;
            let dir = job.out.join(slug(seq)).join(slug(&label));
            fs::create_dir_all(&dir)?;
            info!(
                "{seq} / {label}: {} concept tokens, {} filtered keys",
                concept.len(),
                filter.len()
            );

            let base_grid = run_proportions(base_run, &concept, &filter, job.pooling);
            write_grid(
                &base_grid,
                &dir.join(format!("proportions_{}.csv", slug(&base_run.model_id))),
                &mut files,
            )?;

            let mut series = Vec::new();
            for (i, models) in trained.iter().enumerate() {
                let Some(trained_run) = models.get(seq) else {
                    warn!(
                        "no run for sequence {seq} under {}; skipping",
                        job.trained[i].display()
                    );
                    continue;
                };
                let (t_grid, _, delta) =
                    run_pair_delta(trained_run, base_run, &concept, &filter, job.pooling)?;
                let model_slug = slug(&trained_run.model_id);
                write_grid(
                    &t_grid,
                    &dir.join(format!("proportions_{model_slug}.csv")),
                    &mut files,
                )?;
                write_grid(
                    &delta,
                    &dir.join(format!("delta_{model_slug}.csv")),
                    &mut files,
                )?;
                series.push(Series {
                    label: trained_run.model_id.clone(),
                    values: layer_means(&delta),
                });

                match summarize_distribution(&delta, &job.summary) {
                    Ok(summary) => records.push(SummaryRecord {
                        concept: label.clone(),
                        sequence_id: seq.to_string(),
                        base_model: base_run.model_id.clone(),
                        trained_model: trained_run.model_id.clone(),
                        pooling: job.pooling,
                        summary,
                    }),
                    Err(e) => warn!(
                        "{seq} / {label} / {}: no summary: {e}",
                        trained_run.model_id
                    ),
                }
            }
            if !series.is_empty() {
                let path = dir.join("layer_profile.svg");
                let title = format!(
                    "{label}: mean change in concept proportion per layer vs {}",
                    base_run.model_id
                );
                render_layer_profile(&series, &title, &path)?;
                files.push(path.clone());
                files.push(path.with_extension("csv"));
            }
        }
    }
    if records.is_empty() && files.is_empty() {
        return Err(PipelineError::Data(
            "nothing to analyze: no annotated sequence has a base run".into(),
        ));
    }

    let json_path = job.out.join("summary.json");
    fs::write(&json_path, report_json(&records, job.pooling, &job.summary))?;
    let csv_path = job.out.join("summary.csv");
    let mut buf = Vec::new();
    write_report_csv(&records, &mut buf)?;
    fs::write(&csv_path, buf)?;
    let table_path = job.out.join("summary.md");
    fs::write(&table_path, render_table(&records))?;
    files.extend([json_path, csv_path, table_path]);
    Ok(AnalysisOutput { records, files })
}

// ---------------------------------------------------------------------------
// diff
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct DiffJob {
    pub base: PathBuf,
    pub trained: PathBuf,
    pub layer: usize,
    pub head: usize,
    pub out: PathBuf,
    pub top_k: usize,
    /// Minimum `|delta|` for a relation or fragment to count as changed.
    pub threshold: f64,
    pub annotations: Option<PathBuf>,
    pub row_sum_tolerance: f64,
}

#[derive(Debug, Clone)]
pub struct DiffOutput {
    pub significant: Vec<crate::diff::RelationChange>,
    pub files: Vec<PathBuf>,
}

pub fn cmd_diff(job: &DiffJob) -> Result<DiffOutput> {
    if job.top_k == 0 {
        return Err(PipelineError::Usage("--top-k must be at least 1".into()));
    }
    if job.threshold.is_nan() || job.threshold <= 0.0 {
        return Err(PipelineError::Usage("--threshold must be positive".into()));
    }
    let base = read_run(&job.base)?;
    let trained = read_run(&job.trained)?;
    check_run(&base, job.row_sum_tolerance)?;
    check_run(&trained, job.row_sum_tolerance)?;
    if job.layer >= base.num_layers || job.head >= base.num_heads {
        return Err(PipelineError::Usage(format!(
            "layer {} / head {} out of range for {} layers x {} heads",
            job.layer, job.head, base.num_layers, base.num_heads
        )));
    }
    let diff = raw_attention_diff(&trained, &base, job.layer, job.head)?;
    fs::create_dir_all(&job.out)?;
    let mut files = Vec::new();
    let labels: Vec<String> = base.tokens.iter().map(|t| t.text.clone()).collect();
    let t = base.num_tokens;

    let base_spec = HeatmapSpec {
        rows: t,
        cols: t,
        matrix: base
            .head(job.layer, job.head)
            .iter()
            .map(|&v| f64::from(v))
            .collect(),
        row_labels: labels.clone(),
        col_labels: labels.clone(),
        color_scale: ColorScale::SequentialUnit,
        title: format!(
            "{} attention, layer {}, head {}",
            base.model_id, job.layer, job.head
        ),
    };
    let path = job.out.join("base_attention.svg");
    render_heatmap(&base_spec, &path)?;
    files.extend([path.clone(), path.with_extension("csv")]);

    let diff_spec = HeatmapSpec {
        rows: t,
        cols: t,
        matrix: diff.matrix.clone(),
        row_labels: labels.clone(),
        col_labels: labels,
        color_scale: ColorScale::DivergingSymmetric,
        title: format!(
            "{} minus {}, layer {}, head {}",
            trained.model_id, base.model_id, job.layer, job.head
        ),
    };
    let path = job.out.join("diff.svg");
    render_heatmap(&diff_spec, &path)?;
    files.extend([path.clone(), path.with_extension("csv")]);

    let significant: Vec<_> = top_relation_changes(&diff, job.top_k)
        .into_iter()
        .filter(|c| c.delta.abs() >= job.threshold)
        .collect();
    let path = job.out.join("top_changes.csv");
    let mut buf = Vec::new();
    write_relations_csv(&significant, &mut buf)?;
    fs::write(&path, buf)?;
    files.push(path);

    if let Some(ann_path) = &job.annotations {
        let anns = parse_annotations(&fs::read_to_string(ann_path)?)?;
        for (label, spans) in concepts_of(&anns, &base.sequence_id) {
            let concept = align_concept(&base, &spans)?;
            if concept.is_empty() {
                warn!("concept {label} covers no tokens; no fragment report");
                continue;
            }
            let report = concept_fragment_coverage(&diff, &concept, job.threshold)?;
            let altered: Vec<&str> = report.altered().map(|f| f.token_text.as_str()).collect();
            info!(
                "{label}: altered fragments {altered:?} of {}",
                report.fragments.len()
            );
            let path = job.out.join(format!("fragments_{}.csv", slug(&label)));
            let mut buf = Vec::new();
            report.write_csv(&mut buf)?;
            fs::write(&path, buf)?;
            files.push(path);
        }
    }
    Ok(DiffOutput { significant, files })
}

// ---------------------------------------------------------------------------
// fixtures
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct FixtureJob {
    pub out: PathBuf,
    pub num_layers: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub seed: u64,
    /// Total token count per run (including the start token) for a synthetic
    /// sequence; `None` uses the bundled concept corpus.
    pub tokens: Option<usize>,
    pub bos: bool,
    pub boost: f64,
}

impl Default for FixtureJob {
    fn default() -> Self {
        Self {
            out: PathBuf::from("fixtures"),
            num_layers: 4,
            num_heads: 4,
            head_dim: 8,
            seed: 42,
            tokens: None,
            bos: true,
            boost: 2.0,
        }
    }
}

pub const FIXTURE_BASE_MODEL: &str = "fixture-base";
pub const FIXTURE_TRAINED_MODELS: [&str; 2] = ["fixture-trained-a", "fixture-trained-b"];
pub const CHECKSUM_FILE: &str = "SHA256SUMS";

const SYNTHETIC_WORDS: [&str; 12] = [
    "the", "notice", "of", "ret", "##rench", "##ment", "was", "given", "to", "the", "workman", ".",
];

/// Heads boosted in each trained variant as `(layer, head, boost)`. The first
/// variant shifts mass in a single head; the second in two heads, less strongly.
fn variant_plan(job: &FixtureJob) -> [Vec<(usize, usize, f64)>; 2] {
    let last_layer = job.num_layers - 1;
    let last_head = job.num_heads - 1;
    [
        vec![(0, last_head, job.boost)],
        vec![(last_layer, 0, job.boost / 2.0), (0, 0, job.boost / 4.0)],
    ]
}

fn synthetic_annotations(
    total_tokens: usize,
    bos: bool,
) -> Result<(
    String,
    Vec<crate::tensor_store::TokenRecord>,
    Vec<ConceptAnnotation>,
)> {
    let pieces_needed = if bos {
        total_tokens.checked_sub(1)
    } else {
        Some(total_tokens)
    };
    let n = match pieces_needed {
        Some(n) if n >= 1 => n,
        _ => {
            return Err(PipelineError::Usage(format!(
                "--tokens {total_tokens} leaves no text tokens"
            )))
        }
    };
    let pieces: Vec<&str> = (0..n)
        .map(|i| {
            let w = SYNTHETIC_WORDS[i % SYNTHETIC_WORDS.len()];
            if i == 0 {
                w.trim_start_matches("##")
            } else {
                w
            }
        })
        .collect();
    let (text, tokens) = tokens_from_pieces(&pieces);
    // the middle third of the text tokens
    let lo = n / 3;
    let hi = (2 * n / 3).max(lo + 1).min(n);
    let ann = ConceptAnnotation {
        sequence_id: "synthetic".into(),
        label: "Synthetic".into(),
        char_start: tokens[lo].char_start,
        char_end: tokens[hi - 1].char_end,
        source_text: text.clone(),
    };
    Ok((text, tokens, vec![ann]))
}

#[derive(Debug, Clone)]
pub struct FixtureOutput {
    pub bundles: Vec<PathBuf>,
    pub annotations: PathBuf,
    pub checksums: String,
}

fn bundle_dir(out: &Path, model: &str, sequence: &str) -> PathBuf {
    out.join("bundles").join(slug(model)).join(slug(sequence))
}

/// Sequence id, its annotations, and explicit text and tokens when not tokenized from the corpus.
type SequencePlan = (
    String,
    Vec<ConceptAnnotation>,
    Option<(String, Vec<crate::tensor_store::TokenRecord>)>,
);

pub fn cmd_fixtures(job: &FixtureJob) -> Result<FixtureOutput> {
    if job.num_layers == 0 || job.num_heads == 0 || job.head_dim < 2 {
        return Err(PipelineError::Usage(format!(
            "invalid dims: layers={} heads={} head_dim={} (need >= 1, >= 1, >= 2)",
            job.num_layers, job.num_heads, job.head_dim
        )));
    }
    if !(job.boost > 0.0 && job.boost.is_finite()) {
        return Err(PipelineError::Usage("--boost must be positive".into()));
    }

    let mut sequences: Vec<SequencePlan> = Vec::new();
    match job.tokens {
        Some(total) => {
            let (text, tokens, anns) = synthetic_annotations(total, job.bos)?;
            sequences.push(("synthetic".into(), anns, Some((text, tokens))));
        }
        None => {
            let anns = parse_annotations(CONCEPT_CORPUS)?;
            for a in &anns {
                if !sequences.iter().any(|(s, _, _)| *s == a.sequence_id) {
                    let group = anns
                        .iter()
                        .filter(|b| b.sequence_id == a.sequence_id)
                        .cloned()
                        .collect();
                    sequences.push((a.sequence_id.clone(), group, None));
                }
            }
        }
    }

    fs::create_dir_all(&job.out)?;
    let mut bundles = Vec::new();
    let mut all_anns = Vec::new();
    for (seq_index, (sequence_id, anns, explicit)) in sequences.into_iter().enumerate() {
        let config = FixtureConfig {
            num_layers: job.num_layers,
            num_heads: job.num_heads,
            head_dim: job.head_dim,
            seed: job.seed.wrapping_add(seq_index as u64),
            causal: true,
            weight_scale: 1.0,
            bos: job.bos,
            model_id: FIXTURE_BASE_MODEL.into(),
            sequence_id: sequence_id.clone(),
        };
        let base = match explicit {
            Some((text, tokens)) => generate_run_with_tokens(&config, text, tokens)?,
            None => generate_fixture_run_for_text(&config, &anns[0].source_text)?,
        };
        let refs: Vec<&ConceptAnnotation> = anns.iter().collect();
        let concept = align_concept(&base, &refs)?;
        let dir = bundle_dir(&job.out, FIXTURE_BASE_MODEL, &sequence_id);
        write_run(&base, &dir)?;
        bundles.push(dir);

        for (plan, model) in variant_plan(job).into_iter().zip(FIXTURE_TRAINED_MODELS) {
            let mut trained = base.clone();
            for (layer, head, boost) in plan {
                trained = perturb_run(&trained, layer, head, &concept, boost)?;
            }
            trained.model_id = model.into();
            let dir = bundle_dir(&job.out, model, &sequence_id);
            write_run(&trained, &dir)?;
            bundles.push(dir);
        }
        all_anns.extend(anns);
    }
    let annotations = job.out.join("annotations.json");
    fs::write(&annotations, annotations_to_json(&all_anns))?;

    let checksums = checksum_tree(&job.out, &[CHECKSUM_FILE])?;
    fs::write(job.out.join(CHECKSUM_FILE), &checksums)?;
    info!(
        "wrote {} bundles under {}",
        bundles.len(),
        job.out.display()
    );
    Ok(FixtureOutput {
        bundles,
        annotations,
        checksums,
    })
}

/// `sha256  relative/path` lines for every file under `root`, sorted by path.
pub fn checksum_tree(root: &Path, skip: &[&str]) -> Result<String> {
    let mut files = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.push(path);
            }
        }
    }
    let mut rel: Vec<(String, PathBuf)> = files
        .into_iter()
        .map(|p| {
            (
                p.strip_prefix(root)
                    .expect("walked below root")
                    .to_string_lossy()
                    .replace('\\', "/"),
                p,
            )
        })
        .filter(|(r, _)| !skip.contains(&r.as_str()))
        .collect();
    rel.sort();
    let mut out = String::new();
    for (r, p) in rel {
        let digest = Sha256::digest(fs::read(&p)?);
        out.push_str(&format!("{digest:x}  {r}\n"));
    }
    Ok(out)
}
