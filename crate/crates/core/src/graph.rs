//! Reverse-mode tape over the fixed operation set.
//!
//! A [`Graph`] records each forward operation with its output value; a single
//! reverse sweep then produces gradients for every node that depends on a
//! parameter or a differentiable input.

use crate::error::{Error, Result};
use crate::ops::attention::{self, AttentionParams, AttentionTrace};
use crate::ops::{self, Activation};
use crate::par::Exec;
use crate::similarity;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T: Scalar> {
    Constant,
    Input,
    Param(usize),
    Conv { x: Var, w: Var, b: Var, dilation: usize },
    Act { x: Var, kind: Activation },
    Resize { x: Var },
    Concat(Vec<Var>),
    Mean(Vec<Var>),
    Add(Vec<Var>),
    Attention { x: Var, p: [Var; 4], trace: AttentionTrace },
    Gps { proto: Var, query: Var, w: Var },
    CrossEntropy { logits: Var, target: Tensor<T> },
    WeightedSum { x: Var, weights: Tensor<T> },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    exec: Exec,
    kinks: u64,
}

/// Gradients from one reverse sweep.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(usize, usize)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn of(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// `(param id, gradient)` for every parameter reached by the sweep.
    pub fn params(&self) -> impl Iterator<Item = (usize, &Tensor<T>)> {
        self.params
            .iter()
            .filter_map(|&(node, id)| self.grads[node].as_ref().map(|g| (id, g)))
    }
}

fn mix(h: u64, bit: bool) -> u64 {
    (h ^ (bit as u64 + 1)).wrapping_mul(0x0100_0000_01b3)
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new(Exec::default())
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new(exec: Exec) -> Self {
        Self {
            nodes: Vec::new(),
            exec,
            kinks: 0xcbf2_9ce4_8422_2325,
        }
    }

    pub fn exec(&self) -> Exec {
        self.exec
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Hash of every ReLU sign pattern seen so far. Two evaluations with equal
    /// signatures lie on the same linear piece of the network.
    pub fn kink_signature(&self) -> u64 {
        self.kinks
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Constant, false)
    }

    /// A leaf that receives a gradient (used for gradient checks).
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input, true)
    }

    pub fn param(&mut self, id: usize, t: Tensor<T>) -> Var {
        self.push(t, Op::Param(id), true)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, dilation: usize) -> Result<Var> {
        let out = ops::conv2d_with(self.exec, self.value(x), self.value(w), self.value(b), dilation)?;
        let ng = self.needs(&[x, w, b]);
        Ok(self.push(out, Op::Conv { x, w, b, dilation }, ng))
    }

    pub fn activate(&mut self, x: Var, kind: Activation) -> Var {
        if kind == Activation::Relu {
            let mut h = self.kinks;
            for v in self.nodes[x.0].value.data() {
                h = mix(h, *v > T::zero());
            }
            self.kinks = h;
        }
        let out = ops::activate(self.value(x), kind);
        let ng = self.needs(&[x]);
        self.push(out, Op::Act { x, kind }, ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activate(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activate(x, Activation::Sigmoid)
    }

    pub fn resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let out = ops::bilinear_resize(self.value(x), out_h, out_w)?;
        let ng = self.needs(&[x]);
        Ok(self.push(out, Op::Resize { x }, ng))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let views: Vec<&Tensor<T>> = parts.iter().map(|&v| self.value(v)).collect();
        let out = Tensor::concat_channels(&views)?;
        let ng = self.needs(parts);
        Ok(self.push(out, Op::Concat(parts.to_vec()), ng))
    }

    /// Elementwise mean. Each element's operands are summed in sorted order,
    /// so the result does not depend on the order of `parts`.
    pub fn mean(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Usage("mean of zero tensors".into()))?;
        let shape = self.value(*first).shape().to_vec();
        for &p in parts {
            if self.value(p).shape() != shape.as_slice() {
                return Err(Error::Shape(format!(
                    "mean operands differ: {:?} vs {:?}",
                    self.value(p).shape(),
                    shape
                )));
            }
        }
        let k = parts.len();
        let mut scratch = Vec::with_capacity(k);
        let out = Tensor::from_fn(&shape, |i| {
            scratch.clear();
            scratch.extend(parts.iter().map(|&p| self.nodes[p.0].value.data()[i].to_f64()));
            scratch.sort_by(|a, b| a.total_cmp(b));
            T::from_f64(scratch.iter().sum::<f64>() / k as f64)
        });
        let ng = self.needs(parts);
        Ok(self.push(out, Op::Mean(parts.to_vec()), ng))
    }

    pub fn add(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Usage("sum of zero tensors".into()))?;
        let mut out = self.value(*first).clone();
        for &p in &parts[1..] {
            if self.value(p).shape() != out.shape() {
                return Err(Error::Shape("add operands differ in shape".into()));
            }
            out.add_assign(self.value(p));
        }
        let ng = self.needs(parts);
        Ok(self.push(out, Op::Add(parts.to_vec()), ng))
    }

    pub fn channel_attention(&mut self, x: Var, p: [Var; 4]) -> Result<Var> {
        let (out, trace) = attention::channel_attention(
            self.value(x),
            AttentionParams {
                w1: self.value(p[0]),
                b1: self.value(p[1]),
                w2: self.value(p[2]),
                b2: self.value(p[3]),
            },
        )?;
        let mut h = self.kinks;
        for a in trace.active() {
            h = mix(h, a);
        }
        self.kinks = h;
        let ng = self.needs(&[x, p[0], p[1], p[2], p[3]]);
        Ok(self.push(out, Op::Attention { x, p, trace }, ng))
    }

    pub fn gps(&mut self, proto: Var, query: Var, w: Var) -> Result<Var> {
        let out = similarity::gps_forward(self.value(proto), self.value(query), self.value(w))?;
        let ng = self.needs(&[proto, query, w]);
        Ok(self.push(out, Op::Gps { proto, query, w }, ng))
    }

    pub fn cross_entropy(&mut self, logits: Var, target: &Tensor<T>) -> Result<Var> {
        let loss = ops::cross_entropy(self.value(logits), target)?;
        let ng = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(T::from_f64(loss)),
            Op::CrossEntropy {
                logits,
                target: target.clone(),
            },
            ng,
        ))
    }

    /// `Σ x ⊙ weights`, a scalar probe used to reduce tensor outputs.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor<T>) -> Result<Var> {
        if weights.len() != self.value(x).len() {
            return Err(Error::Shape("weighted_sum weight count mismatch".into()));
        }
        let s: f64 = self
            .value(x)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a.to_f64() * b.to_f64())
            .sum();
        let ng = self.needs(&[x]);
        Ok(self.push(Tensor::scalar(T::from_f64(s)), Op::WeightedSum { x, weights }, ng))
    }

    /// Reverse sweep seeded with `d(objective)/d(seed) = weight` for each scalar seed.
    pub fn backward(&self, seeds: &[(Var, f64)]) -> Result<Gradients<T>> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        for &(v, wgt) in seeds {
            if self.nodes[v.0].value.len() != 1 {
                return Err(Error::Usage("backward seeds must be scalar nodes".into()));
            }
            accumulate(&mut grads, v, Tensor::scalar(T::from_f64(wgt)));
        }
        let mut params = Vec::new();
        for idx in (0..self.nodes.len()).rev() {
            let node = &self.nodes[idx];
            if let Op::Param(id) = node.op {
                params.push((idx, id));
            }
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        params.reverse();
        Ok(Gradients { grads, params })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        match &node.op {
            Op::Constant | Op::Input | Op::Param(_) => {}
            Op::Conv { x, w, b, dilation } => {
                let cg = ops::conv2d_backward(
                    self.exec,
                    self.value(*x),
                    self.value(*w),
                    self.value(*b),
                    *dilation,
                    g,
                    self.wants(*x),
                )?;
                if let Some(gi) = cg.input {
                    accumulate(grads, *x, gi.reshape(self.value(*x).shape())?);
                }
                if self.wants(*w) {
                    accumulate(grads, *w, cg.kernel);
                }
                if self.wants(*b) {
                    accumulate(grads, *b, cg.bias.reshape(self.value(*b).shape())?);
                }
            }
            Op::Act { x, kind } => {
                if self.wants(*x) {
                    let gi = ops::activate_backward(self.value(*x), &node.value, g, *kind);
                    accumulate(grads, *x, gi);
                }
            }
            Op::Resize { x } => {
                if self.wants(*x) {
                    let (_, h, w) = self.value(*x).chw();
                    let gi = ops::bilinear_resize_backward(g, h, w)?;
                    accumulate(grads, *x, gi.reshape(self.value(*x).shape())?);
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if self.wants(p) {
                        let slice = g.data()[offset..offset + n].to_vec();
                        accumulate(grads, p, Tensor::new(self.value(p).shape(), slice)?);
                    }
                    offset += n;
                }
            }
            Op::Mean(parts) => {
                let scaled = g.scale(1.0 / parts.len() as f64);
                for &p in parts {
                    if self.wants(p) {
                        accumulate(grads, p, scaled.clone());
                    }
                }
            }
            Op::Add(parts) => {
                for &p in parts {
                    if self.wants(p) {
                        accumulate(grads, p, g.clone());
                    }
                }
            }
            Op::Attention { x, p, trace } => {
                let ag = attention::channel_attention_backward(
                    self.value(*x),
                    AttentionParams {
                        w1: self.value(p[0]),
                        b1: self.value(p[1]),
                        w2: self.value(p[2]),
                        b2: self.value(p[3]),
                    },
                    trace,
                    g,
                )?;
                let pairs = [(*x, ag.input), (p[0], ag.w1), (p[1], ag.b1), (p[2], ag.w2), (p[3], ag.b2)];
                for (v, t) in pairs {
                    if self.wants(v) {
                        accumulate(grads, v, t.reshape(self.value(v).shape())?);
                    }
                }
            }
            Op::Gps { proto, query, w } => {
                let gg = similarity::gps_backward(
                    self.value(*proto),
                    self.value(*query),
                    self.value(*w),
                    &node.value,
                    g,
                )?;
                for (v, t) in [(*proto, gg.proto), (*query, gg.query), (*w, gg.w)] {
                    if self.wants(v) {
                        accumulate(grads, v, t.reshape(self.value(v).shape())?);
                    }
                }
            }
            Op::CrossEntropy { logits, target } => {
                if self.wants(*logits) {
                    let gi = ops::cross_entropy_backward(self.value(*logits), target, g.data()[0].to_f64())?;
                    accumulate(grads, *logits, gi);
                }
            }
            Op::WeightedSum { x, weights } => {
                if self.wants(*x) {
                    let s = g.data()[0].to_f64();
                    let gi = Tensor::new(
                        self.value(*x).shape(),
                        weights.data().iter().map(|w| T::from_f64(w.to_f64() * s)).collect(),
                    )?;
                    accumulate(grads, *x, gi);
                }
            }
        }
        Ok(())
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
