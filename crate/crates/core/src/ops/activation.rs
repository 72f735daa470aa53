use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

#[inline]
pub fn sigmoid_f64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn activate<T: Scalar>(input: &Tensor<T>, kind: Activation) -> Tensor<T> {
    match kind {
        Activation::Relu => input.map(|v| if v > T::zero() { v } else { T::zero() }),
        Activation::Sigmoid => input.map(|v| T::from_f64(sigmoid_f64(v.to_f64()))),
    }
}

/// Backward pass given the forward input and output. The ReLU subgradient at 0 is 0.
pub fn activate_backward<T: Scalar>(
    input: &Tensor<T>,
    output: &Tensor<T>,
    grad_out: &Tensor<T>,
    kind: Activation,
) -> Tensor<T> {
    let data = match kind {
        Activation::Relu => input
            .data()
            .iter()
            .zip(grad_out.data())
            .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
            .collect(),
        Activation::Sigmoid => output
            .data()
            .iter()
            .zip(grad_out.data())
            .map(|(&s, &g)| {
                let s = s.to_f64();
                T::from_f64(g.to_f64() * s * (1.0 - s))
            })
            .collect(),
    };
    Tensor::new(input.shape(), data).expect("shape preserved")
}
