use mshnet::fixtures::{binary_mask, uniform};
use mshnet::similarity::*;
use mshnet::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn naive_select(f: &Tensor<f32>, m: &Tensor<f32>) -> Vec<Vec<f32>> {
    let (d, h, w) = f.chw();
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if m.data()[y * w + x] == 1.0 {
                out.push((0..d).map(|c| f.data()[(c * h + y) * w + x]).collect());
            }
        }
    }
    out
}

fn naive_cosine(q: &Tensor<f32>, support: &[Vec<f32>], y: usize, x: usize) -> f64 {
    let (d, h, w) = q.chw();
    let xq: Vec<f64> = (0..d).map(|c| q.data()[(c * h + y) * w + x] as f64).collect();
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let mut total = 0.0;
    for s in support {
        let s: Vec<f64> = s.iter().map(|&v| v as f64).collect();
        let (a, b) = (norm(&xq), norm(&s));
        let cos = if a < 1e-12 || b < 1e-12 {
            0.0
        } else {
            xq.iter().zip(&s).map(|(p, q)| p * q).sum::<f64>() / (a * b)
        };
        total += cos.max(0.0);
    }
    total / support.len() as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn selection_and_prototype_match_loops(seed in any::<u64>(), d in 1usize..6, h in 1usize..7, w in 1usize..7, p in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f: Tensor<f32> = uniform(&[d, h, w], -2.0, 2.0, &mut rng);
        let m: Tensor<f32> = binary_mask(h, w, p, &mut rng);
        let set = masked_select(&f, &m).unwrap();
        let expected = naive_select(&f, &m);
        prop_assert_eq!(set.count(), expected.len());
        for (i, v) in expected.iter().enumerate() {
            prop_assert_eq!(set.vector(i), v.as_slice());
        }
        let proto = prototype(&set);
        for c in 0..d {
            let want = if expected.is_empty() {
                0.0
            } else {
                (expected.iter().map(|v| v[c] as f64).sum::<f64>() / expected.len() as f64) as f32
            };
            prop_assert_eq!(proto.vector.data()[c], want);
        }
    }

    #[test]
    fn cosine_matches_loops_and_stays_in_unit_interval(seed in any::<u64>(), d in 1usize..6, n in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q: Tensor<f32> = uniform(&[d, 4, 5], -1.0, 1.0, &mut rng);
        let support: Vec<Vec<f32>> = (0..n).map(|_| uniform::<f32>(&[d], -1.0, 1.0, &mut rng).into_data()).collect();
        let set = MaskedFeatureSet::from_vectors(d, support.clone()).unwrap();
        let out = cosine_sim(&q, &set).unwrap();
        for y in 0..4 {
            for x in 0..5 {
                let v = out.map.values.data()[y * 5 + x];
                prop_assert!((0.0..=1.0).contains(&v));
                prop_assert!((v as f64 - naive_cosine(&q, &support, y, x)).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn gps_stays_open_even_for_huge_logits(seed in any::<u64>(), scale in prop_oneof![Just(1.0), Just(1e3), Just(1e6)]) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q: Tensor<f32> = uniform(&[3, 4, 4], -1.0, 1.0, &mut rng);
        let proto = Prototype { vector: uniform(&[3], -1.0, 1.0, &mut rng) };
        let head = GpsHead { w: uniform(&[1, 6], -scale, scale, &mut rng) };
        let map = gps(&proto, &q, &head).unwrap();
        prop_assert!(map.values.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn energy_map_is_the_mean(seed in any::<u64>(), layers in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let maps: Vec<SimilarityMap<f32>> = (0..layers)
            .map(|_| SimilarityMap { values: uniform(&[1, 3, 3], 0.0, 1.0, &mut rng), kind: SimilarityKind::Cosine })
            .collect();
        let e = energy_map(&maps).unwrap();
        for i in 0..9 {
            let mean = maps.iter().map(|m| m.values.data()[i] as f64).sum::<f64>() / layers as f64;
            prop_assert_eq!(e.data()[i], mean as f32);
        }
    }
}

#[test]
fn empty_mask_gives_zero_prototype_and_degenerate_cosine() {
    let f = Tensor::<f32>::full(&[2, 3, 3], 1.0);
    let set = masked_select(&f, &Tensor::zeros(&[1, 3, 3])).unwrap();
    assert!(set.is_empty());
    assert!(prototype(&set).vector.data().iter().all(|&v| v == 0.0));
    let out = cosine_sim(&f, &set).unwrap();
    assert!(out.degenerate);
    assert!(out.map.values.data().iter().all(|&v| v == 0.0));
}
