use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A trainable tensor with its gradient and Adam moments.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub adam_m: Tensor,
    pub adam_v: Tensor,
    pub step_count: u64,
}

impl Parameter {
    fn new(name: String, value: Tensor) -> Self {
        let shape = value.shape().to_vec();
        Parameter {
            name,
            grad: Tensor::zeros(&shape),
            adam_m: Tensor::zeros(&shape),
            adam_v: Tensor::zeros(&shape),
            value,
            step_count: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Linear learning-rate ramp over the first updates of each parameter.
    pub warmup_steps: u64,
    /// When positive, cosine decay from the end of warmup to zero at this
    /// update.
    pub decay_steps: u64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 2e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, warmup_steps: 0, decay_steps: 0 }
    }
}

impl AdamConfig {
    /// Learning rate of update number `t` (1-based).
    pub fn rate_at(&self, t: u64) -> f64 {
        if t < self.warmup_steps {
            return self.learning_rate * t as f64 / self.warmup_steps as f64;
        }
        if self.decay_steps <= self.warmup_steps {
            return self.learning_rate;
        }
        let span = (self.decay_steps - self.warmup_steps) as f64;
        let x = ((t - self.warmup_steps) as f64 / span).min(1.0);
        self.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * x).cos())
    }
}

/// Named collection of parameters. Insertion order is the canonical order
/// used by checkpoints and gradient buffers.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: BTreeMap<String, ParamId>,
}

/// Per-parameter gradient buffer produced by one backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub(crate) grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Multiplies every gradient by `factor`.
    pub fn scale(&mut self, factor: f64) {
        for t in self.grads.iter_mut().flatten() {
            t.data_mut().iter_mut().for_each(|x| *x *= factor);
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name {name}");
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter::new(name, value));
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn empty_gradients(&self) -> Gradients {
        Gradients { grads: vec![None; self.params.len()] }
    }

    /// Adds a backward pass's gradients into the stored gradients.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (p, g) in self.params.iter_mut().zip(&grads.grads) {
            if let Some(g) = g {
                p.grad.add_assign(g);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.data().iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Bias-corrected Adam update over every parameter, then zeroes gradients.
    pub fn adam_step(&mut self, cfg: &AdamConfig) {
        for p in &mut self.params {
            p.step_count += 1;
            let t = p.step_count as i32;
            let bc1 = 1.0 - cfg.beta1.powi(t);
            let bc2 = 1.0 - cfg.beta2.powi(t);
            let lr = cfg.rate_at(p.step_count);
            let grad = p.grad.data();
            let m = p.adam_m.data_mut();
            for (mi, &g) in m.iter_mut().zip(grad) {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * g;
            }
            let v = p.adam_v.data_mut();
            for (vi, &g) in v.iter_mut().zip(grad) {
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * g * g;
            }
            let (m, v) = (p.adam_m.data(), p.adam_v.data());
            let value = p.value.data_mut();
            for i in 0..value.len() {
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                value[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
        self.zero_grad();
    }

    /// Copies parameter values (not optimizer state) from another store with
    /// the same layout.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        self.check_same_layout(other)?;
        for (p, q) in self.params.iter_mut().zip(&other.params) {
            p.value = q.value.clone();
        }
        Ok(())
    }

    pub fn check_same_layout(&self, other: &ParamStore) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::Contract(format!(
                "parameter count differs: {} vs {}",
                self.params.len(),
                other.params.len()
            )));
        }
        for (p, q) in self.params.iter().zip(&other.params) {
            if p.name != q.name || p.value.shape() != q.value.shape() {
                return Err(Error::Contract(format!(
                    "parameter layout differs at {} {:?} vs {} {:?}",
                    p.name,
                    p.value.shape(),
                    q.name,
                    q.value.shape()
                )));
            }
        }
        Ok(())
    }

    /// Bitwise equality of all parameter values.
    pub fn values_bitwise_eq(&self, other: &ParamStore) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(p, q)| {
                p.name == q.name
                    && p.value.shape() == q.value.shape()
                    && p.value.data().iter().zip(q.value.data()).all(|(a, b)| a.to_bits() == b.to_bits())
            })
    }
}
