//! Random inputs for tests, gradient checks, and benchmarks.

use rand::Rng;

use crate::backbone::{FeaturePyramid, MaskPyramid};
use crate::network::{EpisodeInput, ShotInput};
use crate::tensor::{Scalar, Tensor};

pub fn uniform<T: Scalar>(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64(rng.gen_range(lo..hi)))
}

/// Binary `[1, h, w]` mask with foreground probability `p`.
pub fn binary_mask<T: Scalar>(h: usize, w: usize, p: f64, rng: &mut impl Rng) -> Tensor<T> {
    Tensor::from_fn(&[1, h, w], |_| if rng.gen_bool(p) { T::from_f64(1.0) } else { T::zero() })
}

/// Non-negative features for every `(block, layer)` of `layout` at `sizes`.
pub fn random_pyramid<T: Scalar>(layout: &[Vec<usize>], sizes: &[(usize, usize)], rng: &mut impl Rng) -> FeaturePyramid<T> {
    let blocks = layout
        .iter()
        .zip(sizes)
        .map(|(dims, &(h, w))| dims.iter().map(|&d| uniform(&[d, h, w], 0.0, 1.0, rng)).collect())
        .collect();
    FeaturePyramid::new(blocks).expect("sizes must shrink block to block")
}

/// Masks with at least one foreground pixel per block.
pub fn random_masks<T: Scalar>(sizes: &[(usize, usize)], rng: &mut impl Rng) -> MaskPyramid<T> {
    let masks = sizes
        .iter()
        .map(|&(h, w)| {
            let mut m: Tensor<T> = binary_mask(h, w, 0.4, rng);
            let i = rng.gen_range(0..h * w);
            m.data_mut()[i] = T::from_f64(1.0);
            m
        })
        .collect();
    MaskPyramid { masks }
}

/// A `k`-shot episode plus a binary query target at `out`.
pub fn random_episode<T: Scalar>(
    layout: &[Vec<usize>],
    sizes: &[(usize, usize)],
    k: usize,
    out: (usize, usize),
    rng: &mut impl Rng,
) -> (EpisodeInput<T>, Tensor<T>) {
    let query = random_pyramid(layout, sizes, rng);
    let shots = (0..k)
        .map(|_| ShotInput {
            features: random_pyramid(layout, sizes, rng),
            masks: random_masks(sizes, rng),
        })
        .collect();
    let target = binary_mask(out.0, out.1, 0.4, rng);
    (
        EpisodeInput {
            query,
            shots,
            out_size: out,
        },
        target,
    )
}
