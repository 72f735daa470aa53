//! Named trainable parameters, SGD with momentum, and the learning-rate schedule.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T: Scalar> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub momentum: Tensor<T>,
}

/// Ordered parameter table. Identifiers are unique; gradient and momentum
/// buffers always share the parameter's shape.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T: Scalar = f32> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Usage(format!("duplicate parameter `{}`", name)));
        }
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            momentum: Tensor::zeros(value.shape()),
            name,
            value,
            grad: None,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.id(name).map(|i| &self.params[i])
    }

    pub fn by_id(&self, id: usize) -> &Param<T> {
        &self.params[id]
    }

    pub fn value(&self, id: usize) -> &Tensor<T> {
        &self.params[id].value
    }

    pub fn value_mut(&mut self, id: usize) -> &mut Tensor<T> {
        &mut self.params[id].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    /// Total number of scalar parameters.
    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn accumulate_grad(&mut self, id: usize, grad: &Tensor<T>) -> Result<()> {
        let p = &mut self.params[id];
        if grad.shape() != p.value.shape() {
            return Err(Error::Shape(format!(
                "gradient {:?} does not match parameter `{}` {:?}",
                grad.shape(),
                p.name,
                p.value.shape()
            )));
        }
        match &mut p.grad {
            Some(g) => g.add_assign(grad),
            None => p.grad = Some(grad.clone()),
        }
        Ok(())
    }

    pub fn set_momentum(&mut self, id: usize, m: Tensor<T>) -> Result<()> {
        let p = &mut self.params[id];
        if m.shape() != p.value.shape() {
            return Err(Error::Shape(format!("momentum shape mismatch for `{}`", p.name)));
        }
        p.momentum = m;
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Marks every parameter as having a zero gradient (used when a branch
    /// does not touch some parameters in a step).
    pub fn fill_missing_grads(&mut self) {
        for p in &mut self.params {
            if p.grad.is_none() {
                p.grad = Some(Tensor::zeros(p.value.shape()));
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.as_ref().map(|g| g.cast()),
                    momentum: p.momentum.cast(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// One SGD update with momentum and L2 weight decay:
/// `v <- momentum*v + grad + wd*param; param <- param - lr*v`.
/// Gradients are cleared afterwards.
pub fn sgd_step<T: Scalar>(
    params: &mut ParamSet<T>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if let Some(p) = params.params.iter().find(|p| p.grad.is_none()) {
        return Err(Error::State(format!("parameter `{}` has no gradient", p.name)));
    }
    for p in &mut params.params {
        let g = p.grad.take().expect("checked above");
        for ((w, v), gv) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(p.momentum.data_mut())
            .zip(g.data())
        {
            let nv = momentum * v.to_f64() + gv.to_f64() + weight_decay * w.to_f64();
            *v = T::from_f64(nv);
            *w = T::from_f64(w.to_f64() - lr * nv);
        }
    }
    Ok(())
}

/// `initial_lr * gamma^step`.
pub fn exp_lr_decay(initial_lr: f64, gamma: f64, step: u64) -> f64 {
    initial_lr * gamma.powf(step as f64)
}

/// Uniform fan-in (Kaiming-style) initialisation: `U(-b, b)` with `b = sqrt(6 / fan_in)`.
pub fn kaiming_uniform<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::from_f64(rng.gen_range(-bound..bound)))
}
