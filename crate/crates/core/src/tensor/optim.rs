//! Decoupled AdamW.

use super::params::ParamStore;
use super::Tensor;
use crate::error::{Error, Result};
use std::collections::BTreeMap;

#[derive(Clone, Copy, Debug)]
pub struct AdamWHyper {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWHyper {
    fn default() -> Self {
        AdamWHyper { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-2 }
    }
}

impl AdamWHyper {
    fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.beta1 > 0.0
            && self.beta1 < 1.0
            && self.beta2 > 0.0
            && self.beta2 < 1.0
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid AdamW hyperparameters: {self:?}")));
        }
        Ok(())
    }
}

/// Per-parameter moment estimates.
#[derive(Clone, Debug, Default)]
pub struct AdamWState {
    pub step: u64,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

/// One decoupled-AdamW update of a single parameter:
///   m <- b1*m + (1-b1)*g,  v <- b2*v + (1-b2)*g^2, bias-corrected,
///   p <- p - lr*m_hat/(sqrt(v_hat)+eps) - lr*wd*p.
pub fn adamw_step(param: &mut Tensor, grad: &[f32], state: &mut AdamWState, hyper: &AdamWHyper) -> Result<()> {
    hyper.validate()?;
    if grad.len() != param.numel() {
        return Err(Error::Dimension(format!(
            "adamw_step: parameter has {} elements, gradient has {}",
            param.numel(),
            grad.len()
        )));
    }
    if state.m.is_empty() {
        state.m = vec![0.0; param.numel()];
        state.v = vec![0.0; param.numel()];
    }
    if state.m.len() != param.numel() {
        return Err(Error::Dimension(format!(
            "adamw_step: state has {} elements, parameter has {}",
            state.m.len(),
            param.numel()
        )));
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - (hyper.beta1 as f64).powf(t);
    let bc2 = 1.0 - (hyper.beta2 as f64).powf(t);
    for ((p, &g), (m, v)) in param
        .data_mut()
        .iter_mut()
        .zip(grad)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        *m = hyper.beta1 * *m + (1.0 - hyper.beta1) * g;
        *v = hyper.beta2 * *v + (1.0 - hyper.beta2) * g * g;
        let m_hat = (*m as f64 / bc1) as f32;
        let v_hat = (*v as f64 / bc2) as f32;
        *p -= hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps) + hyper.lr * hyper.weight_decay * *p;
    }
    Ok(())
}

/// AdamW over a whole parameter store, state keyed by parameter name.
pub struct Optimizer {
    pub hyper: AdamWHyper,
    states: BTreeMap<String, AdamWState>,
}

impl Optimizer {
    pub fn new(hyper: AdamWHyper) -> Self {
        Optimizer { hyper, states: BTreeMap::new() }
    }

    /// Applies one step to every parameter that has a gradient entry.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Vec<f32>>) -> Result<()> {
        for (name, grad) in grads {
            let param = params
                .get_mut(name)
                .ok_or_else(|| Error::Contract(format!("optimizer: unknown parameter '{name}'")))?;
            let state = self.states.entry(name.clone()).or_default();
            adamw_step(param, grad, state, &self.hyper)?;
        }
        Ok(())
    }
}
