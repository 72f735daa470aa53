use mshnet::fixtures::{random_episode, uniform};
use mshnet::ops::{self, AttentionParams};
use mshnet::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn config(sim: SimMode) -> (NetConfig, Vec<(usize, usize)>) {
    (NetConfig::new(vec![vec![3, 3], vec![4, 4], vec![5]], 8, sim), vec![(12, 12), (6, 6), (3, 3)])
}

fn net(sim: SimMode, seed: u64) -> (MshNet, ParamSet<f32>) {
    let n = MshNet::new(config(sim).0).unwrap();
    let mut ps = n.init_params(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x55);
    let ids: Vec<usize> = ps.iter().enumerate().filter(|(_, p)| p.name.ends_with(".b")).map(|(i, _)| i).collect();
    for id in ids {
        let shape = ps.value(id).shape().to_vec();
        *ps.value_mut(id) = uniform(&shape, -0.2, 0.2, &mut rng);
    }
    (n, ps)
}

fn p<'a>(ps: &'a ParamSet<f32>, name: &str) -> &'a Tensor<f32> {
    &ps.get(name).unwrap_or_else(|| panic!("{}", name)).value
}

fn relu(t: Tensor<f32>) -> Tensor<f32> {
    t.map(|x| x.max(0.0))
}

fn conv(x: &Tensor<f32>, ps: &ParamSet<f32>, prefix: &str, d: usize) -> Tensor<f32> {
    ops::conv2d(x, p(ps, &format!("{}.w", prefix)), p(ps, &format!("{}.b", prefix)), d).unwrap()
}

fn sum(parts: &[Tensor<f32>]) -> Tensor<f32> {
    let mut acc = parts[0].cast::<f64>();
    for t in &parts[1..] {
        acc.add_assign(&t.cast());
    }
    acc.cast()
}

#[test]
fn block_conv_matches_composed_oracle() {
    let (n, ps) = net(SimMode::Both, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let stack: Tensor<f32> = uniform(&[2, 12, 12], 0.0, 1.0, &mut rng);
    for (branch, tag) in [(Branch::Gps, "gps"), (Branch::Cosine, "cos")] {
        let got = n.block_conv(&stack, branch, 0, &ps).unwrap();
        let a = relu(conv(&stack, &ps, &format!("b2.{}.block.c1", tag), 1));
        let want = relu(conv(&a, &ps, &format!("b2.{}.block.c3", tag), 1));
        assert!(got.max_abs_diff(&want) < 1e-5);
        assert_eq!(got.shape(), &[8, 12, 12]);
    }
    let bad: Tensor<f32> = Tensor::zeros(&[3, 12, 12]);
    assert!(matches!(n.block_conv(&bad, Branch::Gps, 0, &ps), Err(Error::Shape(_))));
}

#[test]
fn zero_inputs_propagate_under_fresh_init() {
    let n = MshNet::new(config(SimMode::Both).0).unwrap();
    let ps = n.init_params(3);
    let z: Tensor<f32> = Tensor::zeros(&[2, 12, 12]);
    let h = Tensor::zeros(&[8, 12, 12]);
    assert!(n.block_conv(&z, Branch::Gps, 0, &ps).unwrap().data().iter().all(|&x| x == 0.0));
    assert!(n.shot_conv(&h, Branch::Gps, 0, &ps).unwrap().data().iter().all(|&x| x == 0.0));
    assert!(n.shot_conv(&h, Branch::Cosine, 0, &ps).unwrap().data().iter().all(|&x| x == 0.0));
    let m = n.merge_conv(&[&h, &h], 0, &ps).unwrap();
    assert!(m.channels.data().iter().all(|&x| x == 0.0));
}

#[test]
fn shot_conv_matches_dilated_oracles() {
    let (n, ps) = net(SimMode::Both, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x: Tensor<f32> = uniform(&[8, 6, 6], -1.0, 1.0, &mut rng);
    let got = n.shot_conv(&x, Branch::Gps, 1, &ps).unwrap();
    let parts: Vec<_> = [1, 2, 4].iter().map(|&d| conv(&x, &ps, &format!("b3.gps.shot.d{}", d), d)).collect();
    assert!(got.max_abs_diff(&relu(sum(&parts))) < 1e-5);
    let got = n.shot_conv(&x, Branch::Cosine, 1, &ps).unwrap();
    assert!(got.max_abs_diff(&relu(conv(&x, &ps, "b3.cos.shot.c3", 1))) < 1e-5);
}

#[test]
fn merge_conv_matches_composed_oracle() {
    let (n, ps) = net(SimMode::Both, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a: Tensor<f32> = uniform(&[8, 3, 3], 0.0, 1.0, &mut rng);
    let b: Tensor<f32> = uniform(&[8, 3, 3], 0.0, 1.0, &mut rng);
    let got = n.merge_conv(&[&a, &b], 2, &ps).unwrap();
    let cat = Tensor::concat_channels(&[&a, &b]).unwrap();
    let fused = relu(conv(&cat, &ps, "b4.merge", 1));
    let (want, _) = ops::channel_attention(
        &fused,
        AttentionParams {
            w1: p(&ps, "b4.merge.att.w1"),
            b1: p(&ps, "b4.merge.att.b1"),
            w2: p(&ps, "b4.merge.att.w2"),
            b2: p(&ps, "b4.merge.att.b2"),
        },
    )
    .unwrap();
    assert!(got.channels.max_abs_diff(&want) < 1e-5);
    assert_eq!(got.block, 4);
    let small = Tensor::zeros(&[8, 2, 3]);
    assert!(matches!(n.merge_conv(&[&a, &small], 2, &ps), Err(Error::Shape(_))));
}

#[test]
fn single_block_pyramid_is_head_plus_upsample() {
    let cfg = NetConfig::new(vec![vec![3]], 8, SimMode::Both);
    let n = MshNet::new(cfg).unwrap();
    let ps = n.init_params(8);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let h: Tensor<f32> = uniform(&[8, 4, 4], 0.0, 1.0, &mut rng);
    let got = n.pyramid_merge(&[&h], (10, 10), &ps).unwrap();
    let want = ops::bilinear_resize(&conv(&h, &ps, "final", 1), 10, 10).unwrap();
    assert!(got.logits.max_abs_diff(&want) < 1e-5);
    assert!(matches!(n.pyramid_merge::<f32>(&[], (10, 10), &ps), Err(Error::Usage(_))));
}

#[test]
fn every_mode_produces_valid_logits() {
    for sim in [SimMode::Both, SimMode::GpsOnly, SimMode::CosineOnly] {
        let (cfg, sizes) = config(sim);
        let (n, ps) = net(sim, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (ep, target) = random_episode::<f32>(&cfg.layout, &sizes, 2, (24, 24), &mut rng);
        let (fin, inner, _) = n.predict(&ps, &ep, Exec::default()).unwrap();
        assert_eq!(fin.logits.shape(), &[2, 24, 24]);
        assert!(fin.logits.all_finite());
        assert_eq!(inner.len(), 3);
        let report = n.loss(&ps, &ep, &target, Exec::default()).unwrap().0;
        assert!(report.total.is_finite() && report.outer >= 0.0);
    }
}

#[test]
fn fifty_sgd_steps_halve_the_loss() {
    let (cfg, sizes) = config(SimMode::Both);
    let (n, mut ps) = net(SimMode::Both, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (ep, _) = random_episode::<f32>(&cfg.layout, &sizes, 1, (24, 24), &mut rng);
    let target = Tensor::from_fn(&[1, 24, 24], |i| if i % 24 < 12 { 1.0 } else { 0.0 });
    let initial = n.loss(&ps, &ep, &target, Exec::default()).unwrap().0.total;
    for _ in 0..50 {
        let (_, grads, _) = n.loss_and_grads(&ps, &ep, &target, Exec::default()).unwrap();
        for (id, g) in grads {
            ps.accumulate_grad(id, &g).unwrap();
        }
        ps.fill_missing_grads();
        sgd_step(&mut ps, 0.01, 0.9, 0.0005).unwrap();
    }
    let last = n.loss(&ps, &ep, &target, Exec::default()).unwrap().0.total;
    assert!(last <= 0.5 * initial, "{} -> {}", initial, last);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn shot_permutation_is_bit_invariant(seed in any::<u64>(), k in 2usize..5, rot in 1usize..4) {
        let (cfg, sizes) = config(SimMode::Both);
        let (n, ps) = net(SimMode::Both, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (ep, _) = random_episode::<f32>(&cfg.layout, &sizes, k, (12, 12), &mut rng);
        let mut perm = ep.clone();
        perm.shots.rotate_left(rot % k);
        let a = n.predict(&ps, &ep, Exec::default()).unwrap();
        let b = n.predict(&ps, &perm, Exec::default()).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn repeated_shot_matches_single_shot(seed in any::<u64>(), k in 2usize..6) {
        let (cfg, sizes) = config(SimMode::Both);
        let (n, ps) = net(SimMode::Both, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (ep, _) = random_episode::<f32>(&cfg.layout, &sizes, 1, (12, 12), &mut rng);
        let mut rep = ep.clone();
        rep.shots = vec![ep.shots[0].clone(); k];
        prop_assert_eq!(n.predict(&ps, &ep, Exec::default()).unwrap(), n.predict(&ps, &rep, Exec::default()).unwrap());
    }
}
