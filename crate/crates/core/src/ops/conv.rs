//! Dilated 2-D cross-correlation with zero "same" padding.

use crate::error::{Error, Result};
use crate::par::Exec;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    dilation: usize,
}

/// Zero-padded channel planes. Sweeping `span` contiguous elements from
/// `offset(ky, kx)` visits every output row with the padded stride; the
/// `pw - w` gap columns between rows are scratch.
struct Padded {
    py: usize,
    px: usize,
    ph: usize,
    pw: usize,
    span: usize,
    c: usize,
    h: usize,
    w: usize,
    dilation: usize,
}

impl Padded {
    fn new(g: &Geometry) -> Self {
        let (py, px) = (g.kh / 2 * g.dilation, g.kw / 2 * g.dilation);
        let pw = g.w + 2 * px;
        Self {
            py,
            px,
            ph: g.h + 2 * py,
            pw,
            span: (g.h - 1) * pw + g.w,
            c: g.c,
            h: g.h,
            w: g.w,
            dilation: g.dilation,
        }
    }

    fn offset(&self, ky: usize, kx: usize) -> usize {
        ky * self.dilation * self.pw + kx * self.dilation
    }

    fn fill<T: Scalar>(&self, input: &Tensor<T>) -> Vec<f64> {
        let mut out = vec![0.0f64; self.c * self.ph * self.pw];
        for c in 0..self.c {
            for y in 0..self.h {
                let src = &input.data()[(c * self.h + y) * self.w..][..self.w];
                let dst = &mut out[(c * self.ph + y + self.py) * self.pw + self.px..][..self.w];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s.to_f64();
                }
            }
        }
        out
    }
}

fn geometry<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    dilation: usize,
) -> Result<Geometry> {
    let (c, h, w) = input.chw();
    let [o, kc, kh, kw] = match kernel.shape() {
        &[o, kc, kh, kw] => [o, kc, kh, kw],
        s => return Err(Error::Shape(format!("kernel must be rank 4, got {:?}", s))),
    };
    if kc != c {
        return Err(Error::Shape(format!(
            "conv2d channel mismatch: input has {} channels, kernel expects {}",
            c, kc
        )));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::Shape(format!(
            "kernel extents must be odd, got {}x{}",
            kh, kw
        )));
    }
    if dilation == 0 {
        return Err(Error::Usage("dilation must be >= 1".into()));
    }
    if bias.len() != o {
        return Err(Error::Shape(format!(
            "bias has {} entries for {} output channels",
            bias.len(),
            o
        )));
    }
    Ok(Geometry {
        c,
        h,
        w,
        o,
        kh,
        kw,
        dilation,
    })
}

pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    dilation: usize,
) -> Result<Tensor<T>> {
    conv2d_with(Exec::default(), input, kernel, bias, dilation)
}

/// Forward pass; output channels are independent work items.
pub fn conv2d_with<T: Scalar>(
    exec: Exec,
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    dilation: usize,
) -> Result<Tensor<T>> {
    let g = geometry(input, kernel, bias, dilation)?;
    let (h, w) = (g.h, g.w);
    let plane = h * w;
    let pad = Padded::new(&g);
    let padded = pad.fill(input);
    let k: Vec<f64> = kernel.data().iter().map(|v| v.to_f64()).collect();
    let mut out = vec![T::zero(); g.o * plane];
    exec.for_each_chunk(&mut out, plane, |o, dst| {
        let mut acc = vec![bias.data()[o].to_f64(); pad.span];
        for c in 0..g.c {
            let kbase = (o * g.c + c) * g.kh * g.kw;
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let wv = k[kbase + ky * g.kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let base = c * pad.ph * pad.pw + pad.offset(ky, kx);
                    for (a, s) in acc.iter_mut().zip(&padded[base..base + pad.span]) {
                        *a += wv * s;
                    }
                }
            }
        }
        for y in 0..h {
            for (d, a) in dst[y * w..(y + 1) * w].iter_mut().zip(&acc[y * pad.pw..y * pad.pw + w]) {
                *d = T::from_f64(*a);
            }
        }
    });
    Tensor::new(&[g.o, h, w], out)
}

/// Strided forward pass (no gradient); output extent is `ceil(n / stride)`.
pub fn conv2d_strided<T: Scalar>(
    exec: Exec,
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
) -> Result<Tensor<T>> {
    let full = conv2d_with(exec, input, kernel, bias, 1)?;
    if stride == 1 {
        return Ok(full);
    }
    let (o, h, w) = full.chw();
    let (oh, ow) = (h.div_ceil(stride), w.div_ceil(stride));
    let d = full.data();
    let out = Tensor::from_fn(&[o, oh, ow], |i| {
        let (ch, r) = (i / (oh * ow), i % (oh * ow));
        let (y, x) = (r / ow * stride, r % ow * stride);
        d[ch * h * w + y * w + x]
    });
    Ok(out)
}

/// Gradients of a conv2d forward pass with respect to its three operands.
pub struct ConvGrads<T: Scalar> {
    pub input: Option<Tensor<T>>,
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    exec: Exec,
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    dilation: usize,
    grad_out: &Tensor<T>,
    need_input: bool,
) -> Result<ConvGrads<T>> {
    let g = geometry(input, kernel, bias, dilation)?;
    let (h, w) = (g.h, g.w);
    let plane = h * w;
    if grad_out.len() != g.o * plane {
        return Err(Error::Shape("conv2d grad_out shape mismatch".into()));
    }
    let pad = Padded::new(&g);
    let k: Vec<f64> = kernel.data().iter().map(|v| v.to_f64()).collect();
    let taps = g.kh * g.kw;
    // Output gradients laid out with the padded row stride, zero in the gaps.
    let mut go = vec![0.0f64; g.o * pad.span];
    for o in 0..g.o {
        for y in 0..h {
            let src = &grad_out.data()[(o * h + y) * w..(o * h + y + 1) * w];
            for (d, s) in go[o * pad.span + y * pad.pw..][..w].iter_mut().zip(src) {
                *d = s.to_f64();
            }
        }
    }

    let grad_input = if need_input {
        let mut gi = vec![T::zero(); g.c * plane];
        exec.for_each_chunk(&mut gi, plane, |c, dst| {
            let mut acc = vec![0.0f64; pad.ph * pad.pw];
            for o in 0..g.o {
                let gs = &go[o * pad.span..(o + 1) * pad.span];
                let kbase = (o * g.c + c) * taps;
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let wv = k[kbase + ky * g.kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let base = pad.offset(ky, kx);
                        for (a, gv) in acc[base..base + pad.span].iter_mut().zip(gs) {
                            *a += wv * gv;
                        }
                    }
                }
            }
            for y in 0..h {
                let row = &acc[(y + pad.py) * pad.pw + pad.px..][..w];
                for (d, a) in dst[y * w..(y + 1) * w].iter_mut().zip(row) {
                    *d = T::from_f64(*a);
                }
            }
        });
        Some(Tensor::new(&[g.c, h, w], gi)?)
    } else {
        None
    };

    let x = pad.fill(input);
    let mut gk = vec![T::zero(); k.len()];
    exec.for_each_chunk(&mut gk, g.c * taps, |o, dst| {
        let gs = &go[o * pad.span..(o + 1) * pad.span];
        for c in 0..g.c {
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let base = c * pad.ph * pad.pw + pad.offset(ky, kx);
                    dst[(c * g.kh + ky) * g.kw + kx] = T::from_f64(dot(gs, &x[base..base + pad.span]));
                }
            }
        }
    });
    let gb: Vec<T> = (0..g.o)
        .map(|o| T::from_f64(go[o * pad.span..(o + 1) * pad.span].iter().sum()))
        .collect();
    Ok(ConvGrads {
        input: grad_input,
        kernel: Tensor::new(kernel.shape(), gk)?,
        bias: Tensor::new(&[g.o], gb)?,
    })
}

/// Four-lane dot product with a fixed reduction order.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut lanes = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            lanes[i] += x[i] * y[i];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]) + tail
}
