use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::{GradMap, ParamStore};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && self.beta1 > 0.0
            && (0.0..1.0).contains(&self.beta2)
            && self.beta2 > 0.0
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Adam moments for the parameters that have been updated at least once.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T: Real> {
    pub step: u64,
    pub first_moment: BTreeMap<String, Tensor<T>>,
    pub second_moment: BTreeMap<String, Tensor<T>>,
    pub hyper: AdamWConfig,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(hyper: AdamWConfig) -> Self {
        OptimizerState {
            step: 0,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
            hyper,
        }
    }
}

/// One decoupled-weight-decay Adam update of every parameter present in `grads`.
/// Parameters without a gradient entry are left untouched and get no state.
pub fn adamw_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &GradMap<T>,
    state: &mut OptimizerState<T>,
) -> Result<()> {
    for (path, g) in grads {
        let p = params.get(path)?;
        if p.shape() != g.shape() {
            return Err(Error::shape("adamw_step", p.shape(), g.shape()));
        }
    }
    state.step += 1;
    let h = state.hyper;
    let t = state.step as i32;
    let bc1 = 1.0 - h.beta1.powi(t);
    let bc2 = 1.0 - h.beta2.powi(t);
    let (b1, b2) = (T::of(h.beta1), T::of(h.beta2));
    let lr = T::of(h.lr);
    let decay = T::of(1.0 - h.lr * h.weight_decay);
    let (bc1, bc2, eps) = (T::of(bc1), T::of(bc2), T::of(h.eps));

    for (path, g) in grads {
        let m = state
            .first_moment
            .entry(path.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state
            .second_moment
            .entry(path.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        if m.shape() != g.shape() || v.shape() != g.shape() {
            return Err(Error::shape("adamw_step moments", m.shape(), g.shape()));
        }
        let p = params.get_mut(path)?;
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mv = b1 * *mv + (T::one() - b1) * gv;
            *vv = b2 * *vv + (T::one() - b2) * gv * gv;
            let mhat = *mv / bc1;
            let vhat = *vv / bc2;
            *pv = *pv * decay - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}
