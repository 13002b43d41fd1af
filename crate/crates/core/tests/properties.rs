mod common;

use std::collections::BTreeMap;

use common::*;
use delta_core::analysis::{mean_std, normalize_activation_map, param_distance_report, Comparison, ComparisonRow};
use delta_core::attention::AttentionTable;
use delta_core::data::{augment, crop, ten_crop, AugmentSpec, Dataset, SyntheticSpec};
use delta_core::model::ConvNetModel;
use delta_core::regularizers::{
    behavioral_penalty, l2_penalty, l2_sp_penalty, private_penalty, FilterWeights, RegularizerKind,
};
use delta_core::tensor::{ops, Graph, Tensor};
use delta_core::trainer::{spar_init, stratified_folds, MetricsLog, MetricsRow, OptimizerState};
use proptest::prelude::*;
use rand::Rng;

fn config() -> ProptestConfig {
    ProptestConfig {
        cases: 48,
        ..ProptestConfig::default()
    }
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn conv_agrees_with_nested_loops(
        n in 1usize..3, c in 1usize..4, o in 1usize..4, h in 3usize..8, w in 3usize..8,
        pad in 0usize..2, k in 1usize..4, seed in any::<u64>(),
    ) {
        prop_assume!(k <= h + 2 * pad && k <= w + 2 * pad);
        let mut r = rng(seed);
        let x = random_tensor(&[n, c, h, w], &mut r, 2.0);
        let wt = random_tensor(&[o, c, k, k], &mut r, 2.0);
        let b = random_tensor(&[o], &mut r, 2.0);
        let expect = naive_conv(&x, &wt, &b, 1, pad);
        let got = ops::conv2d(&x, &ops::ConvKernel::new(wt, b, 1, pad).unwrap()).unwrap();
        for (a, e) in got.data().iter().zip(&expect) {
            prop_assert!((a - e).abs() <= 1e-12);
        }
    }

    #[test]
    fn backward_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in any::<u64>()) {
        let x = random_tensor(&[2, 3], &mut rng(seed), 1.0);
        let grad = |ca: f64, cb: f64| {
            let mut g = Graph::new();
            let v = g.param(x.clone());
            let sq = g.mul(v, v).unwrap();
            let f = g.sum(sq).unwrap();
            let r = g.relu(v).unwrap();
            let gg = g.sum(r).unwrap();
            let fa = g.scale(f, ca).unwrap();
            let gb = g.scale(gg, cb).unwrap();
            let total = g.add(fa, gb).unwrap();
            g.backward(total).unwrap();
            g.grad(v).unwrap().to_vec()
        };
        let (f, g, both) = (grad(1.0, 0.0), grad(0.0, 1.0), grad(a, b));
        for i in 0..both.len() {
            prop_assert!((both[i] - (a * f[i] + b * g[i])).abs() <= 1e-10);
        }
    }

    #[test]
    fn softmax_and_cross_entropy_stay_finite(scale in 0.0f64..700.0, seed in any::<u64>()) {
        let mut r = rng(seed);
        let logits = random_tensor(&[3, 4], &mut r, scale.max(1e-3));
        let p = ops::softmax_rows(&logits).unwrap();
        prop_assert!(p.data().iter().all(|v| v.is_finite() && *v >= 0.0));
        let ce = ops::softmax_cross_entropy(&logits, &[0, 1, 3]).unwrap();
        prop_assert!(ce.is_finite() && ce >= 0.0);
    }

    #[test]
    fn attention_softmax_shift_invariance(
        gaps in prop::collection::vec(-5.0f64..5.0, 1..12), shift in -50.0f64..50.0,
    ) {
        let a = ops::softmax(&gaps);
        let shifted: Vec<f64> = gaps.iter().map(|g| g + shift).collect();
        let b = ops::softmax(&shifted);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
        prop_assert!((a.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        for i in 0..gaps.len() {
            for j in 0..gaps.len() {
                if gaps[i] > gaps[j] {
                    prop_assert!(a[i] > a[j]);
                }
            }
        }
    }

    #[test]
    fn penalties_are_non_negative_and_vanish_at_reference(seed in 0u64..1000) {
        let m = drifted_transfer_model(seed, 2, 6, 3);
        let batch = random_tensor(&[2, 2, 6, 6], &mut rng(seed), 1.0);
        prop_assert!(l2_penalty(&m).unwrap() >= 0.0);
        prop_assert!(l2_sp_penalty(&m).unwrap() >= 0.0);
        prop_assert!(private_penalty(&m).unwrap() >= 0.0);
        prop_assert!(behavioral_penalty(&m, &batch, &[0, 1], FilterWeights::Uniform, false).unwrap() >= 0.0);

        let mut at_ref = m.reset_to_reference();
        for id in at_ref.head_ids() {
            at_ref.params_mut()[id].value.data_mut().fill(0.0);
        }
        prop_assert_eq!(l2_sp_penalty(&at_ref).unwrap(), 0.0);
        prop_assert_eq!(private_penalty(&at_ref).unwrap(), 0.0);
        prop_assert_eq!(behavioral_penalty(&at_ref, &batch, &[0, 1], FilterWeights::Uniform, false).unwrap(), 0.0);
    }

    #[test]
    fn behavioral_penalty_is_linear_in_weights(seed in 0u64..1000, c in 0.01f64..10.0) {
        let m = drifted_transfer_model(seed, 2, 6, 3);
        let batch = random_tensor(&[2, 2, 6, 6], &mut rng(seed + 1), 1.0);
        let taps = m.taps();
        let mut r = rng(seed + 2);
        let rows: Vec<Vec<f64>> = (0..2)
            .map(|_| taps.iter().flat_map(|t| (0..t.channels).map(|_| r.random_range(0.0..1.0)).collect::<Vec<_>>()).collect())
            .collect();
        let scaled: Vec<Vec<f64>> = rows.iter().map(|row| row.iter().map(|w| w * c).collect()).collect();
        let t1 = AttentionTable::new(taps.clone(), [0; 32], [0; 32], rows).unwrap();
        let tc = AttentionTable::new(taps, [0; 32], [0; 32], scaled).unwrap();
        let p1 = behavioral_penalty(&m, &batch, &[0, 1], FilterWeights::Table(&t1), false).unwrap();
        let pc = behavioral_penalty(&m, &batch, &[0, 1], FilterWeights::Table(&tc), false).unwrap();
        prop_assert!((pc - c * p1).abs() <= 1e-12 * pc.abs().max(1.0));
    }

    #[test]
    fn taps_do_not_change_logits_and_spar_start_is_exact(seed in 0u64..1000) {
        let source = ConvNetModel::build(two_conv_spec(2, 6, 4), seed).unwrap();
        let batch = random_tensor(&[3, 2, 6, 6], &mut rng(seed), 1.0);
        let (logits, _) = source.forward_with_taps(&batch).unwrap();
        prop_assert!(logits.bitwise_eq(&source.forward(&batch).unwrap()));

        let start = spar_init(&source, 3, seed + 1).unwrap();
        for p in start.params().iter().filter(|p| !p.head) {
            let r = p.reference.as_ref().unwrap();
            prop_assert!(p.value.bitwise_eq(r));
            let original = source.params().iter().find(|q| q.name == p.name).unwrap();
            prop_assert!(p.value.bitwise_eq(&original.value));
        }
    }

    #[test]
    fn small_momentum_step_decreases_a_convex_quadratic(seed in 0u64..1000, lr in 1e-4f64..0.05) {
        // f(ω) = ½ Σ a_i ω_i² with curvatures a_i in (0.5, 2).
        let mut m = drifted_transfer_model(seed, 1, 4, 2);
        let mut r = rng(seed);
        let curv: Vec<Vec<f64>> = m.params().iter().map(|p| (0..p.value.numel()).map(|_| r.random_range(0.5..2.0)).collect()).collect();
        let f = |m: &ConvNetModel| -> f64 {
            m.params().iter().zip(&curv).map(|(p, a)| p.value.data().iter().zip(a).map(|(w, a)| 0.5 * a * w * w).sum::<f64>()).sum()
        };
        let grads: Vec<Vec<f64>> = m.params().iter().zip(&curv).map(|(p, a)| p.value.data().iter().zip(a).map(|(w, a)| a * w).collect()).collect();
        let before = f(&m);
        let n = m.params().len();
        let mut opt = OptimizerState::new(&m, 0.9, lr, vec![false; n]).unwrap();
        let refs: Vec<Option<&[f64]>> = grads.iter().map(|g| Some(g.as_slice())).collect();
        opt.step(&mut m, &refs).unwrap();
        prop_assert!(f(&m) < before);
    }

    #[test]
    fn augmentation_keeps_shape(h in 6usize..14, w in 6usize..14, crop_size in 2usize..6, mirror in any::<bool>(), seed in any::<u64>()) {
        let img = random_tensor(&[3, h, w], &mut rng(seed), 1.0);
        let mut spec = AugmentSpec::new(crop_size);
        spec.mirror = mirror;
        let out = augment(&img, &spec, &mut rng(seed + 1)).unwrap();
        prop_assert_eq!(out.shape(), &[3, crop_size, crop_size]);
    }

    #[test]
    fn ten_crop_geometry(h in 4usize..12, w in 4usize..12, size in 1usize..4, seed in any::<u64>()) {
        let img = random_tensor(&[2, h, w], &mut rng(seed), 1.0);
        let views = ten_crop(&img, size).unwrap();
        prop_assert_eq!(views.len(), 10);
        let windows = [(0, 0), (0, w - size), (h - size, 0), (h - size, w - size), ((h - size) / 2, (w - size) / 2)];
        for (i, &(top, left)) in windows.iter().enumerate() {
            let expect = crop(&img, top, left, size).unwrap();
            prop_assert!(views[i].bitwise_eq(&expect));
            let mirrored = delta_core::data::hflip(&expect).unwrap();
            prop_assert!(views[i + 5].bitwise_eq(&mirrored));
        }
    }

    #[test]
    fn stratified_folds_partition(labels in prop::collection::vec(0usize..4, 0..60), k in 2usize..6, seed in any::<u64>()) {
        let mut counts = [0usize; 4];
        for &l in &labels {
            counts[l] += 1;
        }
        prop_assume!(counts.iter().all(|&c| c == 0 || c >= k));
        let folds = stratified_folds(&labels, k, seed).unwrap();
        let mut all: Vec<usize> = folds.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());
        for class in 0..4 {
            let per: Vec<usize> = folds.iter().map(|f| f.iter().filter(|&&i| labels[i] == class).count()).collect();
            prop_assert!(per.iter().max().unwrap() - per.iter().min().unwrap() <= 1);
        }
        prop_assert_eq!(folds, stratified_folds(&labels, k, seed).unwrap());
    }

    #[test]
    fn normalization_is_idempotent(h in 1usize..8, w in 1usize..8, seed in any::<u64>()) {
        let map = random_tensor(&[h, w], &mut rng(seed), 5.0);
        prop_assume!(h * w > 1);
        let once = normalize_activation_map(&map).unwrap();
        let twice = normalize_activation_map(&once).unwrap();
        let (lo, hi) = once.data().iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        prop_assert_eq!((lo, hi), (0.0, 1.0));
        for (a, b) in once.data().iter().zip(twice.data()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn distances_are_symmetric_and_match_flat_norms(seed in 0u64..1000) {
        let base = ConvNetModel::build(two_conv_spec(2, 6, 3), seed).unwrap();
        let mut r = rng(seed);
        let deltas: Vec<Tensor> = base.params().iter().map(|p| random_tensor(p.value.shape(), &mut r, 0.3)).collect();
        let mut moved = base.clone();
        for (p, d) in moved.params_mut().iter_mut().zip(&deltas) {
            for (v, dv) in p.value.data_mut().iter_mut().zip(d.data()) {
                *v += dv;
            }
        }
        let grouping = BTreeMap::new();
        let forward = param_distance_report(&base, &moved, &grouping).unwrap();
        let backward = param_distance_report(&moved, &base, &grouping).unwrap();
        for (a, b) in forward.filters.iter().zip(&backward.filters) {
            prop_assert_eq!(a.distance, b.distance);
            let (wi, _) = base.layer_param_ids(a.layer).unwrap();
            let d = &deltas[wi];
            let per = d.numel() / d.shape()[0];
            let flat = &d.data()[a.filter * per..(a.filter + 1) * per];
            let oracle = flat.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((a.distance - oracle).abs() <= 1e-12);
        }
    }

    #[test]
    fn metrics_csv_round_trips(rows in prop::collection::vec((1usize..10_000, 0usize..100, 1e-6f64..1.0, 0.0f64..10.0, 0.0f64..1.0, prop::option::of(0.0f64..1.0)), 0..20)) {
        let log = MetricsLog {
            rows: rows.into_iter().map(|(iteration, epoch, lr, train_loss, train_acc, test_acc)| MetricsRow {
                iteration, epoch, lr, train_loss, train_acc, test_acc,
            }).collect(),
        };
        prop_assert_eq!(MetricsLog::from_csv(&log.to_csv()).unwrap(), log);
    }

    #[test]
    fn comparison_outputs_round_trip(accs in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 2..6), 1..5)) {
        let rows: Vec<ComparisonRow> = accs.iter().zip(RegularizerKind::ALL).map(|(a, kind)| {
            let (mean_acc, std_acc) = mean_std(a);
            ComparisonRow { kind, mean_acc, std_acc, seeds: a.len() }
        }).collect();
        let table = Comparison { rows, delta_vs_l2sp_distance_fraction: None };
        prop_assert_eq!(&Comparison::from_csv(&table.to_csv()).unwrap(), &table);
        let json: serde_json::Value = serde_json::from_str(&table.summary_json().unwrap()).unwrap();
        for r in &table.rows {
            prop_assert_eq!(json[r.kind.as_str()]["mean_acc"].as_f64(), Some(r.mean_acc));
            prop_assert_eq!(json[r.kind.as_str()]["std_acc"].as_f64(), Some(r.std_acc));
        }
        let back: Comparison = serde_json::from_str(&serde_json::to_string(&table).unwrap()).unwrap();
        prop_assert_eq!(back, table);
    }

    #[test]
    fn attention_table_bytes_round_trip(samples in 1usize..6, seed in any::<u64>()) {
        let m = drifted_transfer_model(seed % 100, 2, 6, 3);
        let taps = m.taps();
        let mut r = rng(seed);
        let rows = (0..samples).map(|_| taps.iter().flat_map(|t| {
            let raw: Vec<f64> = (0..t.channels).map(|_| r.random_range(-3.0..3.0)).collect();
            ops::softmax(&raw)
        }).collect()).collect();
        let t = AttentionTable::new(taps, [7; 32], [9; 32], rows).unwrap();
        prop_assert_eq!(AttentionTable::from_bytes(&t.to_bytes().unwrap()).unwrap(), t);
    }
}

#[test]
fn constant_map_normalizes_to_zeros() {
    let map = Tensor::full(&[3, 2], 4.5);
    assert!(normalize_activation_map(&map).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn source_and_target_share_pixel_statistics() {
    let mut spec = SyntheticSpec::new(8, 6, 80, 18);
    spec.target_per_class = 30;
    let (source, target) = spec.generate(0).unwrap();
    let stats = |d: &Dataset| (d.channel_means(), d.channel_variances());
    let ((ms, vs), (mt, vt)) = (stats(&source), stats(&target));
    for c in 0..3 {
        assert!(
            (ms[c] - mt[c]).abs() <= 0.1 * ms[c],
            "channel {c} means {} vs {}",
            ms[c],
            mt[c]
        );
        assert!(
            (vs[c] - vt[c]).abs() <= 0.1 * vs[c],
            "channel {c} variances {} vs {}",
            vs[c],
            vt[c]
        );
    }
    assert_eq!((source.num_classes(), target.num_classes()), (8, 6));
}
