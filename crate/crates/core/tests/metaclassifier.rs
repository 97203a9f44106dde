use std::sync::Arc;

use divdec_core::corpus::{DaVector, TokenId, BOS_ID};
use divdec_core::generator::{Generator, GeneratorConfig};
use divdec_core::metaclassifier::*;
use divdec_core::model::{FeatureModel, SequenceModel};
use divdec_core::numkit::{finite_diff_check, Checkpoint, Matrix, ParamStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn prov(sentence: usize, step: usize) -> StepProvenance {
    StepProvenance {
        iteration: 0,
        sentence,
        step,
        source: SignalSource::Expert,
    }
}

fn small_generator() -> Generator {
    Generator::new(
        GeneratorConfig {
            vocab: 9,
            embed: 4,
            hidden: 5,
            da_dim: 3,
            layers: 1,
            dropout: 0.0,
        },
        11,
    )
    .unwrap()
}

fn random_group(layout: FeatureLayout, n: usize, rng: &mut ChaCha8Rng) -> StepGroup {
    let mut v = |k: usize| (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
    let prefix = v(layout.prefix);
    let suffix = v(layout.suffix);
    let segments: Vec<Arc<[f64]>> = (0..n).map(|_| v(layout.candidate).into()).collect();
    StepGroup {
        provenance: prov(0, 0),
        prefix,
        suffix,
        candidates: (0..n as TokenId).collect(),
        segments,
        labels: (0..n).map(|i| i % 2 == 0).collect(),
    }
}

#[test]
fn zero_output_layer_predicts_one_half() {
    let mut m = MetaParams::new(FeatureLayout::flat(6), 8, 1).unwrap();
    m.zero_output_layer();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let f: Vec<f64> = (0..6).map(|_| rng.gen_range(-5.0..5.0)).collect();
        assert_eq!(m.predict_safe(&f).unwrap(), 0.5);
    }
}

#[test]
fn class_probabilities_sum_to_one() {
    let m = MetaParams::new(FeatureLayout::flat(6), 8, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let f: Vec<f64> = (0..6).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let p = m.probabilities(&f).unwrap();
        assert!((p[0] + p[1] - 1.0).abs() < 1e-9);
        assert!((0.0..=1.0).contains(&p[1]));
    }
}

#[test]
fn wrong_feature_length_is_a_shape_error() {
    let m = MetaParams::new(FeatureLayout::flat(6), 8, 2).unwrap();
    assert!(matches!(m.predict_safe(&[0.0; 5]), Err(divdec_core::Error::Shape(_))));
}

#[test]
fn forward_matches_high_precision_evaluation() {
    // w(tag, r, c) = 0.5 cos(tag + 1.3 r + 0.7 c) + 0.4; mpmath at 30 digits
    let val = |tag: f64, r: usize, c: usize| 0.5 * (tag + 1.3 * r as f64 + 0.7 * c as f64).cos() + 0.4;
    let mut store = ParamStore::new();
    for (name, tag, rows, cols) in [
        ("m.w1", 1.0, 2, 3),
        ("m.b1", 2.0, 2, 1),
        ("m.w2", 3.0, 2, 2),
        ("m.b2", 4.0, 2, 1),
        ("m.w3", 5.0, 2, 2),
        ("m.b3", 6.0, 2, 1),
    ] {
        let data = (0..rows).flat_map(|r| (0..cols).map(move |c| val(tag, r, c))).collect();
        store.add(name, Matrix::from_vec(rows, cols, data).unwrap()).unwrap();
    }
    let m = MetaParams::from_parts(FeatureLayout::flat(3), 2, store).unwrap();
    let p = m.probabilities(&[0.2, 0.4, 0.9]).unwrap();
    assert!((p[1] - 0.440593192548033494162216628935916).abs() < 1e-13, "{p:?}");
    assert!((p[0] - 0.559406807451966505837783371064084).abs() < 1e-13);
}

#[test]
fn gradients_match_finite_differences() {
    let layout = FeatureLayout {
        prefix: 4,
        candidate: 3,
        suffix: 5,
    };
    let mut m = MetaParams::new(layout, 6, 5).unwrap();
    assert!(m.store().num_scalars() <= 200);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let g = random_group(layout, 4, &mut rng);
    m.store_mut().zero_grads();
    let labels = g.labels.clone();
    let segs: Vec<&[f64]> = g.segments.iter().map(|s| &s[..]).collect();
    let view = GroupView {
        prefix: &g.prefix,
        segments: &segs,
        suffix: &g.suffix,
    };
    m.accumulate_group_gradient(view, &labels).unwrap();
    let frozen = m.clone();
    let mut store = m.store().clone();
    let err = finite_diff_check(|s| frozen.group_loss_with(s, view, &labels), &mut store, 1e-6).unwrap();
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn group_path_agrees_with_full_features() {
    let layout = FeatureLayout {
        prefix: 3,
        candidate: 2,
        suffix: 4,
    };
    let m = MetaParams::new(layout, 16, 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let g = random_group(layout, 7, &mut rng);
    let segs: Vec<&[f64]> = g.segments.iter().map(|s| &s[..]).collect();
    let grouped = m
        .predict_group(GroupView {
            prefix: &g.prefix,
            segments: &segs,
            suffix: &g.suffix,
        })
        .unwrap();
    for (i, p) in grouped.iter().enumerate() {
        assert!((p - m.predict_safe(&g.feature(i)).unwrap()).abs() < 1e-12);
    }
}

#[test]
fn generator_features_follow_segment_order() {
    let gen = small_generator();
    let s0 = gen.begin(&DaVector(vec![1.0, 0.0, 1.0])).unwrap();
    // after consuming <s> only, all three history slots are the start token
    let f = build_features(&gen, &s0, 4);
    let (h, e) = (5, 4);
    assert_eq!(f.len(), 2 * h + 4 * e);
    let bos = gen.embedding(BOS_ID);
    for k in 0..3 {
        let off = 2 * h + e * (k + 1);
        assert_eq!(&f[off..off + e], bos);
    }
    // manual concatenation of checkpoint slices
    let mut manual = s0.top_hidden().to_vec();
    manual.extend(gen.control_projection(&s0.d));
    manual.extend_from_slice(gen.embedding(4));
    for _ in 0..3 {
        manual.extend_from_slice(bos);
    }
    assert_eq!(f, manual);

    let s2 = gen.advance(&gen.advance(&s0, 5).unwrap(), 6).unwrap();
    let f2 = build_features(&gen, &s2, 4);
    assert_eq!(&f2[2 * h + e..2 * h + 2 * e], bos);
    assert_eq!(&f2[2 * h + 2 * e..2 * h + 3 * e], gen.embedding(5));
    assert_eq!(&f2[2 * h + 3 * e..], gen.embedding(6));

    // two candidates differ only in the candidate segment
    let a = build_features(&gen, &s2, 2);
    let b = build_features(&gen, &s2, 3);
    for (i, (x, y)) in a.iter().zip(&b).enumerate() {
        if !(2 * h..2 * h + e).contains(&i) {
            assert_eq!(x, y);
        }
    }
    assert_ne!(a, b);
}

#[test]
fn safe_vector_matches_per_word_loop_and_constants() {
    let gen = small_generator();
    let layout = FeatureLayout::of(&gen);
    let meta = MetaParams::new(layout, 12, 3).unwrap();
    let s = gen.advance(&gen.begin(&DaVector(vec![1.0, 1.0, 0.0])).unwrap(), 3).unwrap();
    let dist = gen.distribution(&s);
    let sv = safe_vector(&gen, &s, &dist, &meta).unwrap();
    assert_eq!(sv.b.len(), 9);
    for w in 0..9u32 {
        let p = meta.predict_safe(&build_features(&gen, &s, w)).unwrap();
        assert_eq!(sv.b[w as usize], p > 0.5, "word {w}");
    }
    let ones = safe_vector(&gen, &s, &dist, &meta.clone().constant(0.9)).unwrap();
    assert!(ones.b.iter().all(|&b| b));
    let zeros = safe_vector(&gen, &s, &dist, &meta.clone().constant(0.1)).unwrap();
    assert!(zeros.b.iter().all(|&b| !b));
}

#[test]
fn raising_the_threshold_only_removes_words_between_thresholds() {
    let gen = small_generator();
    let meta = MetaParams::new(FeatureLayout::of(&gen), 12, 21).unwrap();
    let s = gen.begin(&DaVector(vec![0.0, 1.0, 1.0])).unwrap();
    let dist = gen.distribution(&s);
    let probs: Vec<f64> = (0..9u32)
        .map(|w| meta.predict_safe(&build_features(&gen, &s, w)).unwrap())
        .collect();
    for (lo, hi) in [(0.3, 0.5), (0.5, 0.7), (0.1, 0.9)] {
        let a = safe_vector_at(&gen, &s, &dist, &meta, lo).unwrap();
        let b = safe_vector_at(&gen, &s, &dist, &meta, hi).unwrap();
        for w in 0..9 {
            let flipped = a.b[w] != b.b[w];
            assert_eq!(flipped, probs[w] > lo && probs[w] <= hi);
        }
    }
}

#[test]
fn prefix_rule_stops_at_first_unsafe_rank() {
    assert_eq!(safe_prefix_len(&[0.7, 0.2, 0.1, 0.0], &[true; 4], 1e-8), 3);
    assert_eq!(safe_prefix_len(&[0.4, 0.3, 0.2, 0.1], &[true, true, false, true], 1e-8), 2);
    assert_eq!(safe_prefix_len(&[0.4, 0.3, 0.2, 0.1], &[false, true, true, true], 1e-8), 0);
}

#[test]
fn safe_prefix_agrees_with_full_safe_vector() {
    let gen = small_generator();
    for seed in 0..10 {
        let meta = MetaParams::new(FeatureLayout::of(&gen), 12, seed).unwrap();
        let s = gen.begin(&DaVector(vec![1.0, 0.0, 0.0])).unwrap();
        let dist = gen.distribution(&s);
        let sv = safe_vector(&gen, &s, &dist, &meta).unwrap();
        let ranked_probs: Vec<f64> = sv.ranked.iter().map(|&t| dist[t as usize]).collect();
        let len = safe_prefix_len(&ranked_probs, &sv.ranked_flags(), 1e-8);
        let p = safe_prefix(&gen, &s, &dist, &meta, 1e-8, None).unwrap();
        if len == 0 {
            assert!(p.fallback);
            assert_eq!(p.tokens, vec![sv.ranked[0]]);
        } else {
            assert!(!p.fallback);
            assert_eq!(p.tokens, sv.ranked[..len].to_vec());
        }
    }
    let all_safe = MetaParams::new(FeatureLayout::of(&gen), 4, 0).unwrap().constant(0.9);
    let s = gen.begin(&DaVector(vec![1.0, 0.0, 0.0])).unwrap();
    let dist = gen.distribution(&s);
    assert_eq!(safe_prefix(&gen, &s, &dist, &all_safe, 1e-8, Some(3)).unwrap().tokens.len(), 3);
    assert_eq!(safe_prefix(&gen, &s, &dist, &all_safe, 1e-8, None).unwrap().tokens.len(), 9);
}

fn separable_set(n: usize, seed: u64) -> Vec<StepGroup> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let x: f64 = rng.gen_range(-1.0..1.0);
            let y: f64 = rng.gen_range(-1.0..1.0);
            let label = x + 0.5 * y > 0.0;
            let sep = if label { 0.3 } else { -0.3 };
            StepGroup::single(vec![x + sep, y, 1.0], label, prov(i, 0))
        })
        .collect()
}

#[test]
fn separable_samples_reach_full_training_accuracy() {
    let data = separable_set(60, 1);
    let mut m = MetaParams::new(FeatureLayout::flat(3), 16, 2).unwrap();
    let report = train_meta(&data, &mut m, &MetaTrainConfig::default()).unwrap();
    assert_eq!(report.epoch_losses.len(), 30);
    assert_eq!(report.accuracy, 1.0, "{report:?}");
    assert!(!report.one_class);
}

#[test]
fn duplicated_set_equals_doubled_epochs_without_shuffling() {
    let data = separable_set(10, 5);
    let doubled: Vec<StepGroup> = data.iter().chain(&data).cloned().collect();
    let cfg = MetaTrainConfig {
        epochs: 3,
        shuffle: false,
        ..Default::default()
    };
    let mut a = MetaParams::new(FeatureLayout::flat(3), 8, 2).unwrap();
    let mut b = a.clone();
    train_meta(&doubled, &mut a, &cfg).unwrap();
    train_meta(&data, &mut b, &MetaTrainConfig { epochs: 6, ..cfg }).unwrap();
    assert_eq!(a.store(), b.store());
}

#[test]
fn training_is_deterministic_and_flags_one_class_sets() {
    let data = separable_set(20, 3);
    let mut a = MetaParams::new(FeatureLayout::flat(3), 8, 2).unwrap();
    let mut b = a.clone();
    train_meta(&data, &mut a, &MetaTrainConfig::default()).unwrap();
    train_meta(&data, &mut b, &MetaTrainConfig::default()).unwrap();
    assert_eq!(a.store(), b.store());

    let ones: Vec<StepGroup> = (0..5).map(|i| StepGroup::single(vec![i as f64, 1.0, 0.0], true, prov(i, 0))).collect();
    let mut c = MetaParams::new(FeatureLayout::flat(3), 8, 2).unwrap();
    assert!(train_meta(&ones, &mut c, &MetaTrainConfig::default()).unwrap().one_class);
    assert!(train_meta(&[], &mut c, &MetaTrainConfig::default()).is_err());
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let m = MetaParams::new(FeatureLayout { prefix: 2, candidate: 3, suffix: 1 }, 7, 4).unwrap();
    let text = m.to_checkpoint().to_text();
    let back = MetaParams::from_checkpoint(&Checkpoint::from_text(&text, "mem".as_ref()).unwrap()).unwrap();
    let f = [0.1, -0.2, 0.3, 0.4, -0.5, 0.6];
    assert_eq!(m.predict_safe(&f).unwrap().to_bits(), back.predict_safe(&f).unwrap().to_bits());
}

#[test]
fn feature_dims_follow_the_model() {
    let gen = small_generator();
    assert_eq!(gen.feature_dim(), 2 * 5 + 4 * 4);
}
