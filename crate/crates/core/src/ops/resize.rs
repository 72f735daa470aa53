//! Corner-aligned bilinear resampling.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Source coordinate taps `(i0, i1, frac)` for each output index.
fn taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|i| {
            let s = if n_out == 1 || n_in == 1 {
                0.0
            } else {
                i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
            };
            let i0 = (s.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

pub fn bilinear_resize<T: Scalar>(input: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Shape(format!(
            "resize target {}x{} must be positive",
            out_h, out_w
        )));
    }
    let (c, h, w) = input.chw();
    if (h, w) == (out_h, out_w) {
        return input.clone().reshape(&[c, h, w]);
    }
    let ty = taps(h, out_h);
    let tx = taps(w, out_w);
    let src = input.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let p = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let v00 = p[y0 * w + x0].to_f64();
                let v01 = p[y0 * w + x1].to_f64();
                let v10 = p[y1 * w + x0].to_f64();
                let v11 = p[y1 * w + x1].to_f64();
                let top = v00 + (v01 - v00) * fx;
                let bot = v10 + (v11 - v10) * fx;
                out.push(T::from_f64(top + (bot - top) * fy));
            }
        }
    }
    Tensor::new(&[c, out_h, out_w], out)
}

/// Adjoint of [`bilinear_resize`]: scatters output gradients back to the source grid.
pub fn bilinear_resize_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    in_h: usize,
    in_w: usize,
) -> Result<Tensor<T>> {
    let (c, oh, ow) = grad_out.chw();
    if (oh, ow) == (in_h, in_w) {
        return grad_out.clone().reshape(&[c, in_h, in_w]);
    }
    let ty = taps(in_h, oh);
    let tx = taps(in_w, ow);
    let g = grad_out.data();
    let mut acc = vec![0.0f64; c * in_h * in_w];
    for ch in 0..c {
        let base = ch * in_h * in_w;
        for (i, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (j, &(x0, x1, fx)) in tx.iter().enumerate() {
                let gv = g[(ch * oh + i) * ow + j].to_f64();
                acc[base + y0 * in_w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                acc[base + y0 * in_w + x1] += gv * (1.0 - fy) * fx;
                acc[base + y1 * in_w + x0] += gv * fy * (1.0 - fx);
                acc[base + y1 * in_w + x1] += gv * fy * fx;
            }
        }
    }
    Tensor::new(&[c, in_h, in_w], acc.into_iter().map(T::from_f64).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_stays_constant() {
        let x = Tensor::full(&[2, 3, 5], 0.37f32);
        let y = bilinear_resize(&x, 7, 2).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.37));
    }

    #[test]
    fn same_size_is_identity() {
        let x = Tensor::from_fn(&[2, 3, 4], |i| i as f32 * 0.1);
        assert_eq!(bilinear_resize(&x, 3, 4).unwrap(), x);
    }

    #[test]
    fn two_by_two_to_three_by_three_center() {
        let x = Tensor::new(&[1, 2, 2], vec![0.0f32, 1.0, 2.0, 3.0]).unwrap();
        let y = bilinear_resize(&x, 3, 3).unwrap();
        assert_eq!(y.data()[4], 1.5);
        // corners are preserved under corner alignment
        assert_eq!(y.data()[0], 0.0);
        assert_eq!(y.data()[8], 3.0);
    }

    #[test]
    fn down_then_up_preserves_constants() {
        let x = Tensor::full(&[1, 16, 16], -2.25f32);
        let down = bilinear_resize(&x, 5, 3).unwrap();
        assert_eq!(bilinear_resize(&down, 16, 16).unwrap(), x);
    }

    #[test]
    fn backward_is_adjoint() {
        // <resize(x), g> == <x, resize^T(g)>
        let x = Tensor::from_fn(&[2, 3, 4], |i| ((i * 7) % 5) as f64 - 2.0);
        let g = Tensor::from_fn(&[2, 5, 6], |i| ((i * 3) % 7) as f64 * 0.5);
        let y = bilinear_resize(&x, 5, 6).unwrap();
        let gx = bilinear_resize_backward(&g, 3, 4).unwrap();
        let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(gx.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }
}
