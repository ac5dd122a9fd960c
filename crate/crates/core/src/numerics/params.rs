use std::collections::BTreeMap;
use std::sync::Arc;

use rand_distr::{Distribution, Normal};

use super::rng::RngStream;
use super::tape::{Gradients, Tape, Var};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Standard deviation of the normal initializer for weight matrices.
pub const INIT_STD: f64 = 0.02;

/// Named parameter tensors, keyed by dotted path (`base.word.0.attn.w_qk`).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Real> {
    params: BTreeMap<String, Arc<Tensor<T>>>,
}

/// Per-parameter gradients keyed like [`ParamStore`].
pub type GradMap<T> = BTreeMap<String, Tensor<T>>;

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, path: impl Into<String>, t: Tensor<T>) {
        self.params.insert(path.into(), Arc::new(t));
    }

    pub fn get(&self, path: &str) -> Result<&Arc<Tensor<T>>> {
        self.params
            .get(path)
            .ok_or_else(|| Error::Contract(format!("missing parameter {path}")))
    }

    pub fn get_mut(&mut self, path: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(path)
            .map(Arc::make_mut)
            .ok_or_else(|| Error::Contract(format!("missing parameter {path}")))
    }

    pub fn contains(&self, path: &str) -> bool {
        self.params.contains_key(path)
    }

    pub fn remove(&mut self, path: &str) -> Option<Arc<Tensor<T>>> {
        self.params.remove(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Arc<Tensor<T>>)> {
        self.params.iter()
    }

    pub fn paths(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    /// Parameters whose path starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore<T> {
        ParamStore {
            params: self
                .params
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Copies every entry of `other` into `self`, replacing existing ones.
    pub fn merge(&mut self, other: &ParamStore<T>) {
        for (k, v) in &other.params {
            self.params.insert(k.clone(), v.clone());
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), Arc::new(v.cast())))
                .collect(),
        }
    }

    /// Registers every parameter as a tape leaf. Parameters rejected by
    /// `trainable` become constants and receive no gradient.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: impl Fn(&str) -> bool) -> Bindings<'t, T> {
        Bindings {
            vars: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), tape.leaf(v.clone(), trainable(k))))
                .collect(),
        }
    }

    /// Normal(0, std) matrix drawn from a stream derived from `path`.
    pub fn init_normal(&mut self, path: &str, shape: &[usize], std: f64, init: &RngStream) {
        let mut rng = init.derive(path).rng();
        let normal = Normal::new(0.0, std).expect("positive std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::of(normal.sample(&mut rng))).collect();
        self.insert(path, Tensor::from_parts(shape.to_vec(), data));
    }

    pub fn init_const(&mut self, path: &str, shape: &[usize], value: f64) {
        self.insert(path, Tensor::full(shape, T::of(value)));
    }
}

/// Tape handles for a bound [`ParamStore`].
pub struct Bindings<'t, T: Real> {
    vars: BTreeMap<String, Var<'t, T>>,
}

impl<'t, T: Real> Bindings<'t, T> {
    pub fn get(&self, path: &str) -> Result<Var<'t, T>> {
        self.vars
            .get(path)
            .copied()
            .ok_or_else(|| Error::Contract(format!("missing parameter {path}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var<'t, T>)> {
        self.vars.iter()
    }

    /// Extracts gradients for every trainable binding that received one.
    pub fn grads(&self, grads: &Gradients<T>) -> GradMap<T> {
        self.vars
            .iter()
            .filter(|(_, v)| v.requires_grad())
            .map(|(k, v)| (k.clone(), grads.get_or_zeros(*v)))
            .collect()
    }
}

pub fn grad_norm<T: Real>(grads: &GradMap<T>) -> f64 {
    grads
        .values()
        .map(|g| g.sq_norm().f64())
        .sum::<f64>()
        .sqrt()
}

/// Adds `src` into `acc`, inserting missing entries.
pub fn accumulate<T: Real>(acc: &mut GradMap<T>, src: GradMap<T>) {
    for (k, g) in src {
        match acc.get_mut(&k) {
            Some(a) => a.add_assign(&g),
            None => {
                acc.insert(k, g);
            }
        }
    }
}

pub fn scale_grads<T: Real>(grads: &mut GradMap<T>, s: f64) {
    let s = T::of(s);
    for g in grads.values_mut() {
        g.scale_assign(s);
    }
}
