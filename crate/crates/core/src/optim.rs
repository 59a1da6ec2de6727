use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
}

/// Adam moment buffers keyed by parameter name, so they survive a
/// checkpoint round trip independently of parameter ids.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub moments: BTreeMap<String, Moments>,
}

impl Default for AdamState {
    fn default() -> Self {
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One bias-corrected Adam update of `params` from their accumulated
/// gradients. Gradients are left in place; the caller clears them.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, params: &[ParamId], lr: f64) -> Result<()> {
    for &id in params {
        if store.tensor(id).grad.is_none() {
            return Err(Error::Contract(format!("{} has no gradient", store.name(id))));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for &id in params {
        let name = store.name(id).to_owned();
        let tensor = store.tensor_mut(id);
        let n = tensor.len();
        let m = state.moments.entry(name).or_insert_with(|| Moments {
            first: vec![0.0; n],
            second: vec![0.0; n],
        });
        if m.first.len() != n {
            return Err(Error::Shape("adam moments do not match parameter".into()));
        }
        let grad = tensor.grad.take().expect("checked above");
        for (i, v) in tensor.data_mut().iter_mut().enumerate() {
            let g = grad[i];
            m.first[i] = b1 * m.first[i] + (1.0 - b1) * g;
            m.second[i] = b2 * m.second[i] + (1.0 - b2) * g * g;
            let mhat = m.first[i] / c1;
            let vhat = m.second[i] / c2;
            *v -= lr * mhat / (vhat.sqrt() + eps);
        }
        tensor.grad = Some(grad);
    }
    Ok(())
}
