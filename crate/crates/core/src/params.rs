//! Named parameter tensors, graph binding and the Adam optimizer.

use std::collections::HashMap;

use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, Real, RngStream, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub trainable: bool,
}

/// Ordered collection of uniquely named tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T: Real = f32> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate tensor name {name:?}")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry { name, value, trainable });
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].value)
            .ok_or_else(|| Error::UnknownTensor(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.entries[i].value),
            None => Err(Error::UnknownTensor(name.to_string())),
        }
    }

    pub fn is_trainable(&self, name: &str) -> Result<bool> {
        self.index
            .get(name)
            .map(|&i| self.entries[i].trainable)
            .ok_or_else(|| Error::UnknownTensor(name.to_string()))
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::UnknownTensor(name.to_string()))?;
        self.entries[i].trainable = trainable;
        Ok(())
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        self.entries.iter_mut().for_each(|e| e.trainable = trainable);
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry<T>> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    trainable: e.trainable,
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Adds every tensor to `g`: trainable ones as leaves, the rest as constants.
    pub fn bind(&self, g: &mut Graph<T>, bindings: &mut Bindings) {
        for e in &self.entries {
            let v = if e.trainable {
                g.leaf(e.value.clone())
            } else {
                g.constant(e.value.clone())
            };
            bindings.vars.insert(e.name.clone(), v);
        }
    }

    /// Names of tensors whose contents differ bitwise from `other`.
    pub fn changed_since(&self, other: &ParamStore<T>) -> Vec<String> {
        self.entries
            .iter()
            .filter(|e| match other.get(&e.name) {
                Ok(prev) => !prev.bits_eq(&e.value),
                Err(_) => true,
            })
            .map(|e| e.name.clone())
            .collect()
    }
}

/// Name → graph variable map produced by [`ParamStore::bind`].
#[derive(Clone, Debug, Default)]
pub struct Bindings {
    vars: HashMap<String, Var>,
}

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownTensor(name.to_string()))
    }

    pub fn insert(&mut self, name: impl Into<String>, v: Var) {
        self.vars.insert(name.into(), v);
    }
}

/// Tensor with i.i.d. `N(0, std²)` entries.
pub fn normal_tensor<T: Real>(shape: Vec<usize>, std: f64, rng: &mut RngStream) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = if std > 0.0 {
        let dist = Normal::new(0.0, std).expect("finite std");
        (0..n).map(|_| T::of(dist.sample(rng))).collect()
    } else {
        vec![T::zero(); n]
    };
    Tensor::new(shape, data).expect("shape product matches")
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam without weight decay.
#[derive(Clone, Debug)]
pub struct Adam<T: Real = f32> {
    config: AdamConfig,
    step: u64,
    moments: HashMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable tensor of `stores` bound in `g`.
    pub fn step(&mut self, stores: &mut [&mut ParamStore<T>], bindings: &Bindings, g: &Graph<T>) -> Result<()> {
        self.step += 1;
        for store in stores.iter_mut() {
            self.apply(store, bindings, g)?;
        }
        Ok(())
    }

    fn apply(&mut self, store: &mut ParamStore<T>, bindings: &Bindings, g: &Graph<T>) -> Result<()> {
        let c = &self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let bc1 = T::of(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::of(1.0 - c.beta2.powi(self.step as i32));
        let lr = T::of(c.learning_rate);
        let eps = T::of(c.eps);
        for e in store.entries.iter_mut().filter(|e| e.trainable) {
            let var = bindings.get(&e.name)?;
            let Some(grad) = g.grad(var) else { continue };
            let n = e.value.numel();
            let (m, v) = self
                .moments
                .entry(e.name.clone())
                .or_insert_with(|| (vec![T::zero(); n], vec![T::zero(); n]));
            let w = e.value.data_mut();
            for i in 0..n {
                let gi = grad.data()[i];
                m[i] = b1 * m[i] + (T::one() - b1) * gi;
                v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                w[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
