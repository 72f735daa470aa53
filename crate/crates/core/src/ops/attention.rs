//! Channel attention: average-pool squeeze, two fully-connected layers,
//! sigmoid gate, channel-wise rescale.

use super::activation::sigmoid_f64;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const REDUCTION_RATIO: usize = 4;

/// Borrowed attention weights: `w1 [C/r, C]`, `b1 [C/r]`, `w2 [C, C/r]`, `b2 [C]`.
#[derive(Clone, Copy)]
pub struct AttentionParams<'a, T: Scalar> {
    pub w1: &'a Tensor<T>,
    pub b1: &'a Tensor<T>,
    pub w2: &'a Tensor<T>,
    pub b2: &'a Tensor<T>,
}

/// Hidden width of the squeeze layer for `channels` inputs.
pub fn reduced_width(channels: usize, ratio: usize) -> Result<usize> {
    if ratio == 0 || ratio > channels {
        return Err(Error::Config(format!(
            "reduction ratio {} invalid for {} channels",
            ratio, channels
        )));
    }
    if channels % ratio != 0 {
        return Err(Error::Config(format!(
            "{} channels not divisible by reduction ratio {}",
            channels, ratio
        )));
    }
    Ok(channels / ratio)
}

/// Intermediates kept for the backward pass.
pub struct AttentionTrace {
    pooled: Vec<f64>,
    hidden_pre: Vec<f64>,
    hidden: Vec<f64>,
    gate: Vec<f64>,
}

fn check<T: Scalar>(c: usize, p: &AttentionParams<'_, T>) -> Result<usize> {
    let r = p.b1.len();
    if p.w1.shape() != [r, c] || p.w2.shape() != [c, r] || p.b2.len() != c {
        return Err(Error::Shape(format!(
            "attention params do not match {} channels (w1 {:?}, w2 {:?})",
            c,
            p.w1.shape(),
            p.w2.shape()
        )));
    }
    Ok(r)
}

pub fn channel_attention<T: Scalar>(
    input: &Tensor<T>,
    params: AttentionParams<'_, T>,
) -> Result<(Tensor<T>, AttentionTrace)> {
    let (c, h, w) = input.chw();
    let r = check(c, &params)?;
    let plane = h * w;
    let x = input.data();
    let pooled: Vec<f64> = (0..c)
        .map(|ch| x[ch * plane..(ch + 1) * plane].iter().map(|v| v.to_f64()).sum::<f64>() / plane as f64)
        .collect();
    let w1 = params.w1.data();
    let hidden_pre: Vec<f64> = (0..r)
        .map(|j| {
            params.b1.data()[j].to_f64()
                + (0..c).map(|i| w1[j * c + i].to_f64() * pooled[i]).sum::<f64>()
        })
        .collect();
    let hidden: Vec<f64> = hidden_pre.iter().map(|&z| z.max(0.0)).collect();
    let w2 = params.w2.data();
    let gate: Vec<f64> = (0..c)
        .map(|i| {
            sigmoid_f64(
                params.b2.data()[i].to_f64()
                    + (0..r).map(|j| w2[i * r + j].to_f64() * hidden[j]).sum::<f64>(),
            )
        })
        .collect();
    let out = Tensor::from_fn(input.shape(), |idx| {
        T::from_f64(x[idx].to_f64() * gate[idx / plane])
    });
    Ok((
        out,
        AttentionTrace {
            pooled,
            hidden_pre,
            hidden,
            gate,
        },
    ))
}

impl AttentionTrace {
    /// Sign pattern of the squeeze-layer pre-activations.
    pub fn active(&self) -> impl Iterator<Item = bool> + '_ {
        self.hidden_pre.iter().map(|&z| z > 0.0)
    }
}

pub struct AttentionGrads<T: Scalar> {
    pub input: Tensor<T>,
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

pub fn channel_attention_backward<T: Scalar>(
    input: &Tensor<T>,
    params: AttentionParams<'_, T>,
    trace: &AttentionTrace,
    grad_out: &Tensor<T>,
) -> Result<AttentionGrads<T>> {
    let (c, h, w) = input.chw();
    let r = check(c, &params)?;
    let plane = h * w;
    let x = input.data();
    let go = grad_out.data();
    let g_gate: Vec<f64> = (0..c)
        .map(|ch| {
            (ch * plane..(ch + 1) * plane)
                .map(|i| go[i].to_f64() * x[i].to_f64())
                .sum::<f64>()
        })
        .collect();
    let g_z2: Vec<f64> = (0..c)
        .map(|i| g_gate[i] * trace.gate[i] * (1.0 - trace.gate[i]))
        .collect();
    let w2 = params.w2.data();
    let gw2 = Tensor::from_fn(&[c, r], |k| T::from_f64(g_z2[k / r] * trace.hidden[k % r]));
    let gb2 = Tensor::from_fn(&[c], |i| T::from_f64(g_z2[i]));
    let g_z1: Vec<f64> = (0..r)
        .map(|j| {
            if trace.hidden_pre[j] > 0.0 {
                (0..c).map(|i| w2[i * r + j].to_f64() * g_z2[i]).sum()
            } else {
                0.0
            }
        })
        .collect();
    let w1 = params.w1.data();
    let gw1 = Tensor::from_fn(&[r, c], |k| T::from_f64(g_z1[k / c] * trace.pooled[k % c]));
    let gb1 = Tensor::from_fn(&[r], |j| T::from_f64(g_z1[j]));
    let g_pool: Vec<f64> = (0..c)
        .map(|i| (0..r).map(|j| w1[j * c + i].to_f64() * g_z1[j]).sum::<f64>() / plane as f64)
        .collect();
    let gin = Tensor::from_fn(input.shape(), |idx| {
        let ch = idx / plane;
        T::from_f64(go[idx].to_f64() * trace.gate[ch] + g_pool[ch])
    });
    Ok(AttentionGrads {
        input: gin,
        w1: gw1,
        b1: gb1,
        w2: gw2,
        b2: gb2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    struct Owned {
        w1: Tensor<f32>,
        b1: Tensor<f32>,
        w2: Tensor<f32>,
        b2: Tensor<f32>,
    }

    impl Owned {
        fn random(c: usize, rng: &mut ChaCha8Rng) -> Self {
            let r = c / REDUCTION_RATIO;
            Owned {
                w1: random(&[r, c], rng),
                b1: random(&[r], rng),
                w2: random(&[c, r], rng),
                b2: random(&[c], rng),
            }
        }
        fn view(&self) -> AttentionParams<'_, f32> {
            AttentionParams { w1: &self.w1, b1: &self.b1, w2: &self.w2, b2: &self.b2 }
        }
    }

    #[test]
    fn zero_gate_weights_halve_the_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[8, 3, 3], &mut rng);
        let mut p = Owned::random(8, &mut rng);
        p.w2 = Tensor::zeros(&[8, 2]);
        p.b2 = Tensor::zeros(&[8]);
        let (y, _) = channel_attention(&x, p.view()).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert_eq!(*a, 0.5 * b);
        }
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = Owned::random(8, &mut rng);
        let (y, _) = channel_attention(&Tensor::zeros(&[8, 4, 4]), p.view()).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_scalar_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[8, 4, 4], &mut rng);
        let p = Owned::random(8, &mut rng);
        let (y, _) = channel_attention(&x, p.view()).unwrap();
        // oracle: plain loops, written independently
        let (c, r, n) = (8usize, 2usize, 16usize);
        let mut pooled = [0.0f64; 8];
        for ch in 0..c {
            for i in 0..n {
                pooled[ch] += x.data()[ch * n + i] as f64;
            }
            pooled[ch] /= n as f64;
        }
        let mut hid = [0.0f64; 2];
        for j in 0..r {
            let mut z = p.b1.data()[j] as f64;
            for i in 0..c {
                z += p.w1.data()[j * c + i] as f64 * pooled[i];
            }
            hid[j] = if z > 0.0 { z } else { 0.0 };
        }
        for ch in 0..c {
            let mut z = p.b2.data()[ch] as f64;
            for j in 0..r {
                z += p.w2.data()[ch * r + j] as f64 * hid[j];
            }
            let g = 1.0 / (1.0 + (-z).exp());
            for i in 0..n {
                let want = x.data()[ch * n + i] as f64 * g;
                assert!((y.data()[ch * n + i] as f64 - want).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn ratio_larger_than_channels_is_config_error() {
        assert!(matches!(reduced_width(2, 4), Err(Error::Config(_))));
        assert!(matches!(reduced_width(6, 4), Err(Error::Config(_))));
        assert_eq!(reduced_width(64, 4).unwrap(), 16);
    }
}
