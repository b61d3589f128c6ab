mod common;

use common::{plain_run, round_to_half_mantissa};
use concept_attention::annotation::{
    align_span_to_tokens, classify_filter_tokens, ConceptAnnotation, IndexSetKind, TokenIndexSet,
};
use concept_attention::diff::raw_attention_diff;
use concept_attention::fixture::{
    generate_fixture_run, generate_run_with_tokens, perturb_run, tokens_from_pieces, FixtureConfig,
};
use concept_attention::metrics::{grid_delta, head_concept_proportion, run_proportions, Pooling};
use concept_attention::render::{heatmap_svg, profile_y_range, ColorScale, HeatmapSpec, Series};
use concept_attention::stats::{
    histogram_entropy, kurtosis, skewness, sturges_bins, KurtosisMode, LogBase,
};
use concept_attention::tensor_store::{
    read_run, validate_run, write_run, AttentionRun, TokenRecord,
};
use proptest::prelude::*;

const WORDS: [&str; 8] = [
    "the", "notice", "of", "ret", "##rench", "##ment", ",", "employer",
];

fn pieces_strategy(max: usize) -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(prop::sample::select(WORDS.to_vec()), 1..=max).prop_map(|mut v| {
        if let Some(first) = v.first_mut() {
            if first.starts_with("##") {
                *first = "re";
            }
        }
        v.into_iter().map(String::from).collect()
    })
}

fn run_strategy() -> impl Strategy<Value = AttentionRun> {
    (
        1usize..=3,
        1usize..=3,
        pieces_strategy(12),
        any::<u64>(),
        any::<bool>(),
        any::<bool>(),
    )
        .prop_map(|(layers, heads, pieces, seed, causal, bos)| {
            let cfg = FixtureConfig {
                num_layers: layers,
                num_heads: heads,
                head_dim: 4,
                seed,
                causal,
                bos,
                ..FixtureConfig::default()
            };
            generate_fixture_run(&cfg, &pieces).unwrap()
        })
}

fn annotation(run: &AttentionRun, start: usize, end: usize) -> ConceptAnnotation {
    ConceptAnnotation {
        sequence_id: run.sequence_id.clone(),
        label: "C".into(),
        char_start: start,
        char_end: end,
        source_text: run.source_text.clone(),
    }
}

/// A second fixture run over the same text and tokens as `run`.
fn same_tokens(run: &AttentionRun, cfg: &FixtureConfig) -> AttentionRun {
    let text_tokens: Vec<TokenRecord> = run
        .tokens
        .iter()
        .filter(|t| !t.is_special)
        .cloned()
        .collect();
    generate_run_with_tokens(cfg, run.source_text.clone(), text_tokens).unwrap()
}

fn set_from_bits(kind: IndexSetKind, bits: u32, t: usize) -> TokenIndexSet {
    TokenIndexSet::new(kind, (0..t).filter(|i| bits >> i & 1 == 1))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn bundle_round_trip_is_bit_exact(run in run_strategy()) {
        let dir = tempfile::tempdir().unwrap();
        write_run(&run, dir.path()).unwrap();
        let back = read_run(dir.path()).unwrap();
        prop_assert_eq!(&back.tokens, &run.tokens);
        prop_assert_eq!(&back.source_text, &run.source_text);
        let a: Vec<u32> = back.attention.iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = run.attention.iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(a, b);
        prop_assert!(validate_run(&back, 1e-5).is_empty());
    }

    #[test]
    fn alignment_is_exactly_the_overlapping_tokens(run in run_strategy(), a in 0usize..200, b in 0usize..200) {
        let len = run.source_text.chars().count();
        let start = a % len;
        let end = start + 1 + b % (len - start);
        let set = align_span_to_tokens(&run, &annotation(&run, start, end)).unwrap();
        for (i, tok) in run.tokens.iter().enumerate() {
            let overlaps = !tok.is_special && tok.char_start < end && start < tok.char_end;
            prop_assert_eq!(set.contains(i), overlaps, "token {}", i);
        }
    }

    #[test]
    fn alignment_grows_with_the_span(run in run_strategy(), s in 0usize..100, w in 1usize..40, grow_l in 0usize..10, grow_r in 0usize..10) {
        let len = run.source_text.chars().count();
        let start = s % len;
        let end = (start + w).min(len);
        let inner = align_span_to_tokens(&run, &annotation(&run, start, end)).unwrap();
        let outer_span = annotation(&run, start.saturating_sub(grow_l), (end + grow_r).min(len));
        let outer = align_span_to_tokens(&run, &outer_span).unwrap();
        prop_assert!(inner.indices.is_subset(&outer.indices));
    }

    #[test]
    fn proportions_stay_in_unit_interval_and_partition(
        run in run_strategy(), concept_bits in any::<u32>(),
    ) {
        let t = run.num_tokens;
        let filter = classify_filter_tokens(&run);
        let concept = set_from_bits(IndexSetKind::Concept, concept_bits, t);
        let rest = TokenIndexSet::new(IndexSetKind::Concept, (0..t).filter(|i| !concept.contains(*i)));
        let p = run_proportions(&run, &concept, &filter, Pooling::Pooled);
        let q = run_proportions(&run, &rest, &filter, Pooling::Pooled);
        for l in 0..run.num_layers {
            for h in 0..run.num_heads {
                match (p.get(l, h), q.get(l, h)) {
                    (Some(a), Some(b)) => {
                        prop_assert!((0.0..=1.0).contains(&a));
                        prop_assert!((a + b - 1.0).abs() < 1e-12);
                    }
                    (None, None) => {}
                    other => prop_assert!(false, "definedness differs: {:?}", other),
                }
            }
        }
    }

    #[test]
    fn larger_concepts_never_lower_the_proportion(
        run in run_strategy(), small in any::<u32>(), extra in any::<u32>(), filter_bits in any::<u32>(),
        per_query in any::<bool>(),
    ) {
        let t = run.num_tokens;
        let pooling = if per_query { Pooling::PerQuery } else { Pooling::Pooled };
        let filter = set_from_bits(IndexSetKind::Filter, filter_bits, t);
        let c1 = set_from_bits(IndexSetKind::Concept, small, t);
        let c2 = set_from_bits(IndexSetKind::Concept, small | extra, t);
        for l in 0..run.num_layers {
            for h in 0..run.num_heads {
                let m = run.head(l, h);
                let a = head_concept_proportion(m, t, &c1, &filter, pooling);
                let b = head_concept_proportion(m, t, &c2, &filter, pooling);
                if let (Some(a), Some(b)) = (a, b) {
                    prop_assert!(a <= b + 1e-12);
                }
            }
        }
    }

    #[test]
    fn filtered_keys_do_not_count_as_concept(
        run in run_strategy(), concept_bits in any::<u32>(), filter_bits in any::<u32>(),
    ) {
        // filtering a concept token is the same as dropping it from the concept
        let t = run.num_tokens;
        let filter = set_from_bits(IndexSetKind::Filter, filter_bits, t);
        let concept = set_from_bits(IndexSetKind::Concept, concept_bits, t);
        let trimmed = set_from_bits(IndexSetKind::Concept, concept_bits & !filter_bits, t);
        let a = run_proportions(&run, &concept, &filter, Pooling::Pooled);
        let b = run_proportions(&run, &trimmed, &filter, Pooling::Pooled);
        prop_assert_eq!(a.values, b.values);
    }

    #[test]
    fn delta_grids_are_antisymmetric(x in run_strategy(), seed in any::<u64>(), bits in any::<u32>()) {
        let cfg = FixtureConfig {
            num_layers: x.num_layers, num_heads: x.num_heads, head_dim: 4, seed, causal: x.causal,
            bos: x.tokens[0].is_special, ..FixtureConfig::default()
        };
        let y = same_tokens(&x, &cfg);
        let t = x.num_tokens;
        let concept = set_from_bits(IndexSetKind::Concept, bits, t);
        let filter = TokenIndexSet::empty(IndexSetKind::Filter);
        let gx = run_proportions(&x, &concept, &filter, Pooling::Pooled);
        let gy = run_proportions(&y, &concept, &filter, Pooling::Pooled);
        let zero = grid_delta(&gx, &gx).unwrap();
        prop_assert!(zero.values.iter().all(|v| v.is_none_or(|v| v == 0.0)));
        let d1 = grid_delta(&gx, &gy).unwrap();
        let d2 = grid_delta(&gy, &gx).unwrap();
        for (a, b) in d1.values.iter().zip(&d2.values) {
            match (a, b) {
                (Some(a), Some(b)) => {
                    prop_assert_eq!(*a, -*b);
                    prop_assert!((-1.0..=1.0).contains(a));
                }
                (None, None) => {}
                other => prop_assert!(false, "{:?}", other),
            }
        }
    }

    #[test]
    fn diff_rows_sum_to_zero(x in run_strategy(), seed in any::<u64>()) {
        let cfg = FixtureConfig {
            num_layers: x.num_layers, num_heads: x.num_heads, head_dim: 4, seed, causal: x.causal,
            bos: x.tokens[0].is_special, ..FixtureConfig::default()
        };
        let y = same_tokens(&x, &cfg);
        let t = x.num_tokens;
        for l in 0..x.num_layers {
            for h in 0..x.num_heads {
                let d = raw_attention_diff(&y, &x, l, h).unwrap();
                for q in 0..t {
                    let row = &d.matrix[q * t..(q + 1) * t];
                    prop_assert!(row.iter().sum::<f64>().abs() < 1e-6);
                    prop_assert!(row.iter().all(|v| (-1.0..=1.0).contains(v)));
                    if x.causal {
                        prop_assert!(row[q + 1..].iter().all(|&v| v == 0.0));
                    }
                }
                let back = raw_attention_diff(&x, &y, l, h).unwrap();
                prop_assert!(d.matrix.iter().zip(&back.matrix).all(|(a, b)| *a == -*b));
            }
        }
    }

    #[test]
    fn perturbation_raises_only_its_head(run in run_strategy(), bits in 1u32.., boost in 0.05f64..4.0, lh in any::<(u8, u8)>()) {
        let t = run.num_tokens;
        let concept = TokenIndexSet::new(
            IndexSetKind::Concept,
            (0..t).filter(|&i| bits >> i & 1 == 1 && !run.tokens[i].is_special),
        );
        prop_assume!(!concept.is_empty() && concept.len() < t);
        let (layer, head) = (lh.0 as usize % run.num_layers, lh.1 as usize % run.num_heads);
        let filter = TokenIndexSet::empty(IndexSetKind::Filter);
        let after = perturb_run(&run, layer, head, &concept, boost).unwrap();
        prop_assert!(validate_run(&after, 1e-5).is_empty());
        let before_grid = run_proportions(&run, &concept, &filter, Pooling::Pooled);
        let after_grid = run_proportions(&after, &concept, &filter, Pooling::Pooled);
        for l in 0..run.num_layers {
            for h in 0..run.num_heads {
                if (l, h) == (layer, head) {
                    prop_assert!(after_grid.get(l, h).unwrap() > before_grid.get(l, h).unwrap());
                } else {
                    prop_assert_eq!(after.head(l, h), run.head(l, h));
                    prop_assert_eq!(after_grid.get(l, h), before_grid.get(l, h));
                }
            }
        }
    }

    #[test]
    fn affine_maps_preserve_shape_statistics(
        xs in prop::collection::vec(-50.0f64..50.0, 4..300), a in 0.1f64..20.0, b in -100.0f64..100.0,
    ) {
        let s = skewness(&xs);
        prop_assume!(s.is_ok());
        let s = s.unwrap();
        let k = kurtosis(&xs, KurtosisMode::Plain).unwrap();
        let ys: Vec<f64> = xs.iter().map(|x| a * x + b).collect();
        let neg: Vec<f64> = xs.iter().map(|x| -a * x + b).collect();
        let tol = 1e-6 * (1.0 + s.abs() + k.abs());
        prop_assert!((skewness(&ys).unwrap() - s).abs() < tol);
        prop_assert!((skewness(&neg).unwrap() + s).abs() < tol);
        prop_assert!((kurtosis(&ys, KurtosisMode::Plain).unwrap() - k).abs() < tol);
        prop_assert!((kurtosis(&neg, KurtosisMode::Plain).unwrap() - k).abs() < tol);

        // histogram assignment only moves when a value sits on a bin edge
        let bins = sturges_bins(xs.len()).unwrap();
        let (lo, hi) = xs.iter().fold((f64::MAX, f64::MIN), |(l, h), &x| (l.min(x), h.max(x)));
        let near_edge = xs.iter().any(|&x| {
            let pos = (x - lo) / (hi - lo) * bins as f64;
            pos > 0.5 && pos < bins as f64 - 0.5 && (pos - pos.round()).abs() < 1e-6
        });
        prop_assume!(!near_edge);
        let h = histogram_entropy(&xs, bins, LogBase::Natural).unwrap();
        prop_assert!((histogram_entropy(&ys, bins, LogBase::Natural).unwrap() - h).abs() < 1e-9);
    }

    #[test]
    fn entropy_is_bounded_by_log_bins(xs in prop::collection::vec(-5.0f64..5.0, 1..500), bins in 1usize..40, two in any::<bool>()) {
        let base = if two { LogBase::Base2 } else { LogBase::Natural };
        let h = histogram_entropy(&xs, bins, base).unwrap();
        prop_assert!(h >= 0.0);
        prop_assert!(h <= base.log(bins as f64) + 1e-12);
        let constant = vec![xs[0]; xs.len()];
        prop_assert_eq!(histogram_entropy(&constant, bins, base).unwrap(), 0.0);
    }

    #[test]
    fn sturges_matches_float_formula(n in 1usize..1_000_000) {
        let expected = (n as f64).log2().ceil() as usize + 1;
        prop_assert_eq!(sturges_bins(n).unwrap(), expected);
    }

    #[test]
    fn half_precision_runs_pass_loose_tolerance(run in run_strategy()) {
        let mut half = run.clone();
        for v in half.attention.iter_mut() {
            *v = round_to_half_mantissa(*v);
        }
        prop_assert!(validate_run(&half, 1e-3).is_empty());
    }

    #[test]
    fn diverging_heatmaps_are_symmetric(values in prop::collection::vec(-1.0f64..1.0, 9)) {
        let spec = HeatmapSpec {
            rows: 3, cols: 3, matrix: values.clone(),
            row_labels: vec!["a".into(), "b".into(), "c".into()],
            col_labels: vec!["a".into(), "b".into(), "c".into()],
            color_scale: ColorScale::DivergingSymmetric,
            title: "t".into(),
        };
        let (lo, hi) = spec.domain();
        prop_assert_eq!(lo, -hi);
        prop_assert!(hi > 0.0);
        prop_assert_eq!(spec.color(0.0), "#f7f7f7");
        prop_assert_eq!(heatmap_svg(&spec).unwrap(), heatmap_svg(&spec.clone()).unwrap());
    }

    #[test]
    fn profile_range_contains_data_and_band(values in prop::collection::vec(prop::option::of(-0.5f64..0.5), 1..40)) {
        let series = [Series { label: "s".into(), values: values.clone() }];
        let (lo, hi) = profile_y_range(&series);
        prop_assert!(lo <= -0.01 && hi >= 0.01);
        for v in values.iter().flatten() {
            prop_assert!(lo <= *v && *v <= hi);
        }
    }
}

#[test]
fn tolerance_separates_half_precision_error() {
    // each row of this 1×1×3×3 run is off by exactly 1e-5 in f32 arithmetic terms
    let rows = [[1.0f32, 0.0, 0.0], [0.25, 0.75, 0.0], [0.5, 0.25, 0.25]];
    let mut attention = Vec::new();
    for r in rows {
        let mut r = r;
        r[0] += 1e-5;
        attention.extend(r);
    }
    let run = plain_run(1, 1, 3, true, attention);
    assert!(validate_run(&run, 1e-3).is_empty());
    assert_eq!(validate_run(&run, 1e-9).violations.len(), 3);
}

#[test]
fn pieces_build_contiguous_offsets() {
    let (text, tokens) = tokens_from_pieces(&["notice", "of", "ret", "##rench", "##ment"]);
    assert_eq!(text, "notice of retrenchment");
    let spans: Vec<(usize, usize)> = tokens.iter().map(|t| (t.char_start, t.char_end)).collect();
    assert_eq!(spans, [(0, 6), (7, 9), (10, 13), (13, 18), (18, 22)]);
}
