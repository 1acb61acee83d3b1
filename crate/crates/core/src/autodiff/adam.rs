use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tape::{GradientMap, ParamId};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment accumulators plus the step counter.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    t: u64,
    first: BTreeMap<ParamId, Vec<f64>>,
    second: BTreeMap<ParamId, Vec<f64>>,
}

impl AdamState {
    pub fn new() -> Self {
        AdamState::default()
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self, id: ParamId) -> Option<&[f64]> {
        self.first.get(&id).map(Vec::as_slice)
    }

    pub fn second_moment(&self, id: ParamId) -> Option<&[f64]> {
        self.second.get(&id).map(Vec::as_slice)
    }

    /// Rebuilds a state from serialized parts.
    pub fn from_parts(t: u64, first: BTreeMap<ParamId, Vec<f64>>, second: BTreeMap<ParamId, Vec<f64>>) -> Self {
        AdamState { t, first, second }
    }

    pub fn moments(&self) -> impl Iterator<Item = (ParamId, &[f64], &[f64])> {
        self.first.iter().map(|(id, m)| (*id, m.as_slice(), self.second[id].as_slice()))
    }
}

/// A parameter to update together with its learning rate.
pub struct ParamSlot<'a> {
    pub id: ParamId,
    pub tensor: &'a mut Tensor,
    pub lr: f64,
}

/// One bias-corrected Adam update over `params`. Parameters absent from
/// `grads` are treated as having zero gradient. If any gradient is
/// non-finite nothing is modified and an error is returned.
pub fn adam_step(params: &mut [ParamSlot<'_>], grads: &GradientMap, state: &mut AdamState, hyper: &AdamHyper) -> Result<()> {
    for slot in params.iter() {
        if !(slot.lr > 0.0) {
            return Err(Error::InvalidArgument(format!("learning rate must be positive, got {}", slot.lr)));
        }
        if let Some(g) = grads.get(&slot.id) {
            if g.shape() != slot.tensor.shape() {
                return Err(Error::Shape(format!(
                    "gradient {:?} for parameter {:?}",
                    g.shape(),
                    slot.tensor.shape()
                )));
            }
            if g.values().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {:?}", slot.id)));
            }
        }
    }

    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    for slot in params.iter_mut() {
        let n = slot.tensor.len();
        let m = state.first.entry(slot.id).or_insert_with(|| vec![0.0; n]);
        let v = state.second.entry(slot.id).or_insert_with(|| vec![0.0; n]);
        let g = grads.get(&slot.id).map(Tensor::values);
        for (i, p) in slot.tensor.values_mut().iter_mut().enumerate() {
            let gi = g.map_or(0.0, |g| g[i]);
            m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * gi;
            v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            *p -= slot.lr * m_hat / (v_hat.sqrt() + hyper.eps);
        }
    }
    Ok(())
}
