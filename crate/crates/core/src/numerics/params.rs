use std::collections::{BTreeSet, HashMap};

use super::tape::{Gradients, Tape};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub group: String,
    pub value: Tensor,
    pub grad: Vec<f64>,
}

/// Named learnable tensors with gradient buffers, organised in groups that
/// can be frozen as a unit.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
    frozen: BTreeSet<String>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, group: &str, value: Tensor) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::DuplicateParam(name.to_string()));
        }
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            group: group.to_string(),
            grad: vec![0.0; value.len()],
            value,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].grad
    }

    pub(crate) fn param_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn set_frozen(&mut self, group: &str, frozen: bool) {
        if frozen {
            self.frozen.insert(group.to_string());
        } else {
            self.frozen.remove(group);
        }
    }

    pub fn is_frozen(&self, group: &str) -> bool {
        self.frozen.contains(group)
    }

    pub fn is_param_frozen(&self, id: ParamId) -> bool {
        self.is_frozen(&self.params[id.0].group)
    }

    pub fn groups(&self) -> BTreeSet<String> {
        self.params.iter().map(|p| p.group.clone()).collect()
    }

    /// Copies of every tensor in a group, in registration order.
    pub fn group_snapshot(&self, group: &str) -> Vec<Tensor> {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .map(|p| p.value.clone())
            .collect()
    }

    /// Adds the gradients of every parameter leaf on `tape` into the
    /// store's gradient buffers.
    pub fn accumulate(&mut self, tape: &Tape, grads: &Gradients) {
        for (var, id) in tape.param_leaves() {
            if let Some(g) = grads.get(var) {
                let dst = &mut self.params[id.0].grad;
                for (d, s) in dst.iter_mut().zip(g) {
                    *d += s;
                }
            }
        }
    }

    /// Replace values from a list of named tensors. Every stored parameter
    /// must be present with a matching shape.
    pub fn load_named(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        let lookup: HashMap<&str, &Tensor> = tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for p in &mut self.params {
            let t = lookup
                .get(p.name.as_str())
                .ok_or_else(|| Error::Format(format!("missing tensor `{}`", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Format(format!(
                    "tensor `{}` has shape {:?}, expected {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = (*t).clone();
        }
        Ok(())
    }

    pub fn named_values(&self) -> Vec<(String, Tensor)> {
        self.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect()
    }
}
