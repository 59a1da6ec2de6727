//! Named parameter storage.
//!
//! Every trainable scalar of the model lives in one [`ParamStore`] under a
//! hierarchical name (`backbone/...`, `seqnet/...`, `domain/<id>/...`). The
//! `requires_grad` flag on each tensor is the single switch deciding whether
//! a forward pass builds a gradient path to it.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value: {
                let mut v = value;
                v.requires_grad = false;
                v.grad = None;
                v
            },
        });
        Ok(id)
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

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total number of scalars over all parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Marks exactly `ids` as trainable and freezes everything else. Frozen
    /// parameters lose any gradient buffer they had.
    pub fn set_trainable(&mut self, ids: &[ParamId]) {
        for p in &mut self.params {
            p.value.requires_grad = false;
            p.value.grad = None;
        }
        for id in ids {
            let t = &mut self.params[id.0].value;
            t.requires_grad = true;
            t.grad = Some(vec![0.0; t.len()]);
        }
    }

    pub fn trainable(&self) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.value.requires_grad).map(|(id, _)| id).collect()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            if let Some(g) = p.value.grad.as_mut() {
                g.fill(0.0);
            }
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, grad: &[f64], scale: f64) -> Result<()> {
        let p = &mut self.params[id.0];
        if !p.value.requires_grad {
            return Err(Error::Contract(format!("{} is frozen", p.name)));
        }
        let n = p.value.len();
        let buf = p.value.grad.get_or_insert_with(|| vec![0.0; n]);
        if buf.len() != grad.len() {
            return Err(Error::Shape(format!("gradient for {} has wrong length", p.name)));
        }
        for (d, g) in buf.iter_mut().zip(grad) {
            *d += scale * g;
        }
        Ok(())
    }

    /// Copies the values of `src` into `dst`; shapes must agree.
    pub fn copy_value(&mut self, src: ParamId, dst: ParamId) -> Result<()> {
        let value = self.params[src.0].value.data().to_vec();
        let d = &mut self.params[dst.0];
        if d.value.len() != value.len() {
            return Err(Error::Shape(format!("cannot copy into {}", d.name)));
        }
        d.value.data_mut().copy_from_slice(&value);
        Ok(())
    }
}
