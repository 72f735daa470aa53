use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

fn check_target<T: Scalar>(logits: &Tensor<T>, target: &Tensor<T>) -> Result<usize> {
    let (c, h, w) = logits.chw();
    if c != 2 {
        return Err(Error::Shape(format!("logits must have 2 channels, got {}", c)));
    }
    let (tc, th, tw) = target.chw();
    if (tc, th, tw) != (1, h, w) {
        return Err(Error::Shape(format!(
            "target {:?} does not match logits {}x{}",
            target.shape(),
            h,
            w
        )));
    }
    if let Some(v) = target.data().iter().find(|&&v| v != T::zero() && v.to_f64() != 1.0) {
        return Err(Error::Data(format!("mask value {:?} outside {{0,1}}", v)));
    }
    Ok(h * w)
}

/// Per-pixel `(log p_target, p_foreground)` from two-class logits.
#[inline]
fn pixel(l0: f64, l1: f64, fg: bool) -> (f64, f64) {
    let m = l0.max(l1);
    let lse = m + ((l0 - m).exp() + (l1 - m).exp()).ln();
    let logp = if fg { l1 - lse } else { l0 - lse };
    (logp, (l1 - lse).exp())
}

/// Mean negative log-likelihood of the target class over all pixels.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    let n = check_target(logits, target)?;
    let l = logits.data();
    let t = target.data();
    let total: f64 = (0..n)
        .map(|i| -pixel(l[i].to_f64(), l[n + i].to_f64(), t[i].to_f64() == 1.0).0)
        .sum();
    Ok(total / n as f64)
}

pub fn cross_entropy_backward<T: Scalar>(
    logits: &Tensor<T>,
    target: &Tensor<T>,
    grad_loss: f64,
) -> Result<Tensor<T>> {
    let n = check_target(logits, target)?;
    let l = logits.data();
    let t = target.data();
    let mut g = vec![T::zero(); 2 * n];
    let scale = grad_loss / n as f64;
    for i in 0..n {
        let fg = t[i].to_f64() == 1.0;
        let (_, p1) = pixel(l[i].to_f64(), l[n + i].to_f64(), fg);
        let y1 = if fg { 1.0 } else { 0.0 };
        g[n + i] = T::from_f64(scale * (p1 - y1));
        g[i] = T::from_f64(scale * ((1.0 - p1) - (1.0 - y1)));
    }
    Tensor::new(logits.shape(), g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_logits_give_ln2() {
        let l = Tensor::full(&[2, 3, 4], 0.3f32);
        let t = Tensor::from_fn(&[1, 3, 4], |i| (i % 2) as f32);
        assert!((cross_entropy(&l, &t).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn saturated_correct_prediction() {
        let t = Tensor::from_fn(&[1, 2, 2], |i| (i % 2) as f32);
        let l = Tensor::from_fn(&[2, 2, 2], |i| {
            let (ch, p) = (i / 4, i % 4);
            if ch == p % 2 { 20.0 } else { -20.0 }
        });
        assert!(cross_entropy(&l, &t).unwrap() < 1e-8);
    }

    #[test]
    fn matches_softmax_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let l = Tensor::from_fn(&[2, 3, 3], |_| rng.gen_range(-3.0f32..3.0));
        let t = Tensor::from_fn(&[1, 3, 3], |_| if rng.gen_bool(0.5) { 1.0f32 } else { 0.0 });
        let mut want = 0.0f64;
        for i in 0..9 {
            let a = l.data()[i] as f64;
            let b = l.data()[9 + i] as f64;
            let p = if t.data()[i] == 1.0 { b.exp() / (a.exp() + b.exp()) } else { a.exp() / (a.exp() + b.exp()) };
            want -= p.ln();
        }
        want /= 9.0;
        assert!((cross_entropy(&l, &t).unwrap() - want).abs() < 1e-6);
    }

    #[test]
    fn non_binary_target_is_data_error() {
        let l = Tensor::<f32>::zeros(&[2, 1, 2]);
        let t = Tensor::new(&[1, 1, 2], vec![0.0f32, 2.0]).unwrap();
        assert!(matches!(cross_entropy(&l, &t), Err(Error::Data(_))));
    }

    #[test]
    fn three_channel_logits_rejected() {
        let l = Tensor::<f32>::zeros(&[3, 1, 2]);
        let t = Tensor::<f32>::zeros(&[1, 1, 2]);
        assert!(matches!(cross_entropy(&l, &t), Err(Error::Shape(_))));
    }
}
