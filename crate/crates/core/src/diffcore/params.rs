use std::collections::HashMap;

use super::graph::{Graph, StatUpdate, Var};
use super::{Rng, Tensor};
use crate::error::{Error, Result};

/// Index of a parameter inside its [`ParamRegistry`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    /// Buffers (batchnorm running statistics) are stored but never optimised.
    pub trainable: bool,
    /// Multiplier applied to the optimiser learning rate.
    pub lr_scale: f64,
}

impl Param {
    fn new(name: &str, value: Tensor, trainable: bool) -> Self {
        let n = value.numel();
        Param {
            name: name.to_string(),
            value,
            grad: vec![0.0; n],
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            trainable,
            lr_scale: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Named parameters with stable insertion order and Adam state.
#[derive(Clone, Debug, Default)]
pub struct ParamRegistry {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

/// Graph leaves for every entry of a registry, in registry order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Binding over caller-made leaves, one per registry entry in order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }
}

impl ParamRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.id(name).map(|id| self.get(id))
    }

    /// Total number of trainable scalars.
    pub fn num_weights(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.numel()).sum()
    }

    fn insert(&mut self, param: Param) -> ParamId {
        assert!(
            !self.index.contains_key(&param.name),
            "duplicate parameter name {}",
            param.name
        );
        self.index.insert(param.name.clone(), self.params.len());
        self.params.push(param);
        ParamId(self.params.len() - 1)
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        self.insert(Param::new(name, value, true))
    }

    pub fn add_buffer(&mut self, name: &str, value: Tensor) -> ParamId {
        self.insert(Param::new(name, value, false))
    }

    pub fn add_uniform(&mut self, name: &str, shape: &[usize], bound: f64, rng: &mut Rng) -> ParamId {
        self.add(name, rng.uniform_tensor(shape, -bound, bound))
    }

    pub fn add_normal(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut Rng) -> ParamId {
        let mut t = rng.normal_tensor(shape);
        t.data_mut().iter_mut().for_each(|v| *v *= std);
        self.add(name, t)
    }

    /// Sets the learning-rate multiplier of every parameter whose name starts
    /// with `prefix`.
    pub fn set_lr_scale(&mut self, prefix: &str, scale: f64) {
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.lr_scale = scale;
        }
    }

    /// Creates one leaf per entry. Trainable entries receive gradients,
    /// buffers are constants.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if p.trainable {
                    g.input(p.value.clone())
                } else {
                    g.constant(p.value.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// Binds every entry as a constant.
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        let vars = self.params.iter().map(|p| g.constant(p.value.clone())).collect();
        Bound { vars }
    }

    /// Adds the leaf gradients of `g` into the registry's gradient buffers.
    pub fn accumulate_grads(&mut self, g: &Graph, bound: &Bound) {
        for (p, v) in self.params.iter_mut().zip(&bound.vars) {
            if let Some(grad) = g.grad(*v) {
                for (a, b) in p.grad.iter_mut().zip(grad) {
                    *a += b;
                }
            }
        }
    }

    /// Folds batchnorm batch statistics into running averages.
    pub fn apply_stat_updates(&mut self, updates: &[StatUpdate], bound: &Bound, momentum: f64) {
        let lookup: HashMap<Var, usize> = bound.vars.iter().enumerate().map(|(i, v)| (*v, i)).collect();
        for u in updates {
            for (var, obs) in [(u.running_mean, &u.mean), (u.running_var, &u.var)] {
                if let Some(&i) = lookup.get(&var) {
                    for (r, o) in self.params[i].value.data_mut().iter_mut().zip(obs) {
                        *r = (1.0 - momentum) * *r + momentum * o;
                    }
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// L2 norm of the gradients of parameters whose name starts with `prefix`.
    pub fn grad_norm(&self, prefix: &str) -> f64 {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .flat_map(|p| p.grad.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Bias-corrected Adam update of every trainable entry, then zeroes all
    /// gradients.
    pub fn adam_step(&mut self, lr: f64, cfg: AdamConfig) {
        for p in self.params.iter_mut().filter(|p| p.trainable) {
            p.step += 1;
            let t = p.step as i32;
            let bc1 = 1.0 - cfg.beta1.powi(t);
            let bc2 = 1.0 - cfg.beta2.powi(t);
            let step = lr * p.lr_scale;
            let data = p.value.data_mut();
            for k in 0..data.len() {
                let g = p.grad[k];
                p.m[k] = cfg.beta1 * p.m[k] + (1.0 - cfg.beta1) * g;
                p.v[k] = cfg.beta2 * p.v[k] + (1.0 - cfg.beta2) * g * g;
                let mhat = p.m[k] / bc1;
                let vhat = p.v[k] / bc2;
                data[k] -= step * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
        self.zero_grads();
    }

    /// Replaces values (and optimiser state) from `other`, which must hold
    /// exactly the same names and shapes in the same order.
    pub fn load_from(&mut self, other: ParamRegistry) -> Result<()> {
        if other.params.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                self.params.len(),
                other.params.len()
            )));
        }
        for (mine, theirs) in self.params.iter().zip(&other.params) {
            if mine.name != theirs.name || mine.value.shape() != theirs.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter mismatch: {} {:?} vs {} {:?}",
                    mine.name,
                    mine.value.shape(),
                    theirs.name,
                    theirs.value.shape()
                )));
            }
        }
        let scales: Vec<f64> = self.params.iter().map(|p| p.lr_scale).collect();
        self.params = other.params;
        for (p, s) in self.params.iter_mut().zip(scales) {
            p.lr_scale = s;
        }
        self.index = other.index;
        Ok(())
    }

    pub(crate) fn from_params(params: Vec<Param>) -> Result<Self> {
        let mut reg = ParamRegistry::new();
        for p in params {
            if reg.index.contains_key(&p.name) {
                return Err(Error::Checkpoint(format!("duplicate parameter {}", p.name)));
            }
            reg.insert(p);
        }
        Ok(reg)
    }

    pub(crate) fn params(&self) -> &[Param] {
        &self.params
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut reg = ParamRegistry::new();
        let id = reg.add("w", Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap());
        reg.adam_step(0.1, AdamConfig::default());
        assert_eq!(reg.get(id).value.data(), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut reg = ParamRegistry::new();
        let id = reg.add("w", Tensor::scalar(1.0));
        reg.get_mut(id).grad[0] = 1.0;
        reg.adam_step(0.1, AdamConfig::default());
        let v = reg.get(id).value.item();
        assert!((v - 0.9).abs() < 1e-6, "{v}");
        assert_eq!(reg.get(id).grad[0], 0.0);
    }

    #[test]
    fn defaults_use_half_momentum() {
        let c = AdamConfig::default();
        assert_eq!((c.beta1, c.beta2), (0.5, 0.999));
    }

    #[test]
    fn lr_scale_applies_by_prefix() {
        let mut reg = ParamRegistry::new();
        let a = reg.add("backbone.w", Tensor::scalar(0.0));
        let b = reg.add("head.w", Tensor::scalar(0.0));
        reg.set_lr_scale("backbone.", 0.1);
        reg.get_mut(a).grad[0] = 1.0;
        reg.get_mut(b).grad[0] = 1.0;
        reg.adam_step(1.0, AdamConfig::default());
        assert!((reg.get(a).value.item() + 0.1).abs() < 1e-6);
        assert!((reg.get(b).value.item() + 1.0).abs() < 1e-6);
    }
}
