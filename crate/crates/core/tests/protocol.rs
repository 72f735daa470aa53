use std::collections::BTreeSet;

use mshnet::backbone::{FeatureSource, TinyBackbone, TinyBackboneConfig};
use mshnet::protocol::*;
use mshnet::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn corpus(images: usize, classes: usize) -> ImageStore {
    let idx = synth_index(&SynthConfig {
        images,
        classes,
        height: 32,
        width: 32,
        max_shapes: 2,
        seed: 4,
    })
    .unwrap();
    let bb = TinyBackbone::new(TinyBackboneConfig {
        input_h: 32,
        input_w: 32,
        stem_channels: 8,
        channels: vec![8, 8, 16],
        layers: vec![1, 2, 1],
        ..Default::default()
    })
    .unwrap();
    ImageStore::new(idx, FeatureSource::Tiny(bb))
}

fn small_net(store: &ImageStore) -> MshNet {
    let FeatureSource::Tiny(bb) = store.source() else { unreachable!() };
    MshNet::new(NetConfig::new(bb.config().layout(), 8, SimMode::Both)).unwrap()
}

#[test]
fn pascal_contiguous_fold_zero_names() {
    let f = build_folds(20, 0, FoldScheme::Contiguous).unwrap();
    let names: Vec<_> = f.test.iter().map(|&c| PASCAL_CLASSES[c]).collect();
    assert_eq!(names, ["aeroplane", "bicycle", "bird", "boat", "bottle"]);
}

#[test]
fn folds_partition_both_schemes() {
    for classes in [20, 80] {
        for scheme in [FoldScheme::Contiguous, FoldScheme::Interleaved] {
            let tests: Vec<BTreeSet<usize>> = (0..FOLDS).map(|i| build_folds(classes, i, scheme).unwrap().test).collect();
            let union: BTreeSet<usize> = tests.iter().flatten().copied().collect();
            assert_eq!(union, (0..classes).collect());
            assert_eq!(tests.iter().map(|t| t.len()).sum::<usize>(), classes);
        }
    }
}

#[test]
fn leakage_filter_on_synthetic_corpus() {
    let store = corpus(80, 8);
    for fold in 0..FOLDS {
        let spec = build_folds(8, fold, FoldScheme::Interleaved).unwrap();
        let kept = filter_train_images(store.index(), &spec, 5, 1).unwrap();
        assert!(kept.images.iter().all(|e| e.classes.is_disjoint(&spec.test)));
        for &c in &spec.train {
            let n = kept.images_with(c).len();
            assert!(n >= 1);
        }
        assert!(kept.images.len() <= 5 * spec.train.len());
    }
}

#[test]
fn sampled_episodes_respect_the_split() {
    let store = corpus(40, 4);
    let spec = build_folds(4, 3, FoldScheme::Contiguous).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for split in [Split::Train, Split::Test] {
        for _ in 0..40 {
            let ep = sample_episode(store.index(), &spec, split, 2, Sampling::ClassFirst, &mut rng).unwrap();
            let pool = if split == Split::Train { &spec.train } else { &spec.test };
            assert!(pool.contains(&ep.class));
            let (input, target) = episode_input(&store, &ep, Exec::Sequential).unwrap();
            assert_eq!(input.shots.len(), 2);
            assert_eq!(target.shape(), &[1, 32, 32]);
            assert!(target.data().iter().any(|&v| v == 1.0));
        }
    }
}

fn brute_force(pairs: &[(usize, Vec<u8>, Vec<u8>)]) -> (f64, f64) {
    let classes: BTreeSet<usize> = pairs.iter().map(|p| p.0).collect();
    let mut ious = Vec::new();
    for c in classes {
        let (mut tp, mut fp, mut fneg) = (0u64, 0u64, 0u64);
        for (_, pred, truth) in pairs.iter().filter(|p| p.0 == c) {
            for i in 0..pred.len() {
                tp += (pred[i] == 1 && truth[i] == 1) as u64;
                fp += (pred[i] == 1 && truth[i] == 0) as u64;
                fneg += (pred[i] == 0 && truth[i] == 1) as u64;
            }
        }
        if tp + fp + fneg > 0 {
            ious.push(tp as f64 / (tp + fp + fneg) as f64);
        }
    }
    let side = |v: u8| {
        let (mut tp, mut d) = (0u64, 0u64);
        for (_, pred, truth) in pairs {
            for i in 0..pred.len() {
                tp += (pred[i] == v && truth[i] == v) as u64;
                d += (pred[i] == v || truth[i] == v) as u64;
            }
        }
        (d > 0).then(|| tp as f64 / d as f64)
    };
    let fb: Vec<f64> = [side(1), side(0)].into_iter().flatten().collect();
    (
        ious.iter().sum::<f64>() / ious.len() as f64,
        fb.iter().sum::<f64>() / fb.len() as f64,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn metrics_equal_pixel_count_oracle(seed in any::<u64>(), n in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pairs: Vec<(usize, Vec<u8>, Vec<u8>)> = (0..n)
            .map(|_| {
                let len = rng.gen_range(1..40);
                let p = rng.gen_range(0.0..1.0);
                let pred = (0..len).map(|_| rng.gen_bool(p) as u8).collect();
                let truth = (0..len).map(|_| rng.gen_bool(0.5) as u8).collect();
                (rng.gen_range(0..3), pred, truth)
            })
            .collect();
        let mut r = EvalResult::new();
        for (c, p, t) in &pairs {
            r.add(*c, p, t).unwrap();
        }
        let (m, fb) = brute_force(&pairs);
        match r.miou() {
            Ok(v) => prop_assert_eq!(v, m),
            Err(_) => prop_assert!(m.is_nan()),
        }
        prop_assert_eq!(r.fb_iou().unwrap(), fb);
    }
}

#[test]
fn evaluation_is_deterministic_and_schedule_independent() {
    let store = corpus(24, 4);
    let spec = build_folds(4, 0, FoldScheme::Contiguous).unwrap();
    let net = small_net(&store);
    let params = net.init_params(2);
    let cfg = EvalConfig {
        k: 1,
        episodes: 12,
        seed: 6,
        sampling: Sampling::ClassFirst,
        split: Split::Test,
    };
    let a = run_evaluation(&net, &params, &store, &spec, &cfg, Exec::Parallel).unwrap();
    let b = run_evaluation(&net, &params, &store, &spec, &cfg, Exec::Sequential).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.episodes, 12);
    assert!(matches!(
        run_evaluation(&net, &params, &store, &spec, &EvalConfig { episodes: 0, ..cfg }, Exec::Sequential),
        Err(Error::Usage(_))
    ));
}

#[test]
fn zero_steps_returns_the_initial_parameters() {
    let store = corpus(24, 4);
    let spec = build_folds(4, 0, FoldScheme::Contiguous).unwrap();
    let net = small_net(&store);
    let init = net.init_params(2);
    let cfg = TrainConfig {
        steps: 0,
        ..Default::default()
    };
    let out = run_training(&net, init.clone(), &store, &spec, &cfg, Exec::Sequential, &mut |_, _| Ok(())).unwrap();
    assert!(out.log.is_empty());
    assert_eq!(
        network::checkpoint_bytes(&out.params),
        network::checkpoint_bytes(&init)
    );
}

#[test]
fn training_matches_across_schedules_and_checkpoints_on_cadence() {
    let store = corpus(24, 4);
    let spec = build_folds(4, 1, FoldScheme::Contiguous).unwrap();
    let net = small_net(&store);
    let cfg = TrainConfig {
        steps: 4,
        batch: 3,
        checkpoint_every: 2,
        steps_per_epoch: 2,
        ..Default::default()
    };
    let mut seen = Vec::new();
    let a = run_training(&net, net.init_params(1), &store, &spec, &cfg, Exec::Parallel, &mut |s, _| {
        seen.push(s);
        Ok(())
    })
    .unwrap();
    let b = run_training(&net, net.init_params(1), &store, &spec, &cfg, Exec::Sequential, &mut |_, _| Ok(())).unwrap();
    assert_eq!(seen, [2, 4]);
    assert_eq!(a.log, b.log);
    assert_eq!(network::checkpoint_bytes(&a.params), network::checkpoint_bytes(&b.params));
    assert_eq!(a.log[2].lr, cfg.lr * cfg.gamma);
}

#[test]
fn divergence_is_a_numerical_error() {
    let store = corpus(24, 4);
    let spec = build_folds(4, 0, FoldScheme::Contiguous).unwrap();
    let net = small_net(&store);
    let cfg = TrainConfig {
        lr: 1e35,
        steps: 5,
        batch: 2,
        ..Default::default()
    };
    let r = run_training(&net, net.init_params(0), &store, &spec, &cfg, Exec::Sequential, &mut |_, _| Ok(()));
    assert!(matches!(r, Err(Error::Numerical(_))), "{:?}", r.err());
}
