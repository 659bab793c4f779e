use std::collections::HashSet;

use super::{Gradients, Tensor};
use crate::error::{contract_err, dim_err, Result};

/// Handle to a tensor owned by a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered storage for every trainable tensor of a model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers `tensor` under `name`, marking it trainable.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.names.iter().any(|n| *n == name) {
            return contract_err(format!("duplicate parameter name `{name}`"));
        }
        self.names.push(name);
        self.tensors.push(tensor.with_requires_grad(true));
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        for t in &mut self.tensors {
            t.clear_grad();
        }
    }

    /// Adds the parameter gradients recorded in `grads` into the stored tensors.
    pub fn accumulate(&mut self, grads: &Gradients) -> Result<()> {
        for (id, g) in grads.params() {
            self.tensors[id.0].accumulate_grad(g)?;
        }
        Ok(())
    }

    /// Copies of every tensor with its name, in registration order.
    pub fn export(&self) -> Vec<(String, Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| {
                let copy = Tensor::new(t.shape(), t.data().to_vec()).expect("stored tensors are valid");
                (n.clone(), copy)
            })
            .collect()
    }

    /// Overwrites every stored tensor from `named`, which must match the
    /// store's names and shapes exactly.
    pub fn import(&mut self, named: &[(String, Tensor)]) -> Result<()> {
        if named.len() != self.tensors.len() {
            return dim_err(format!(
                "store holds {} tensors, import provides {}",
                self.tensors.len(),
                named.len()
            ));
        }
        for (name, t) in named {
            let Some(id) = self.find(name) else {
                return dim_err(format!("unexpected tensor `{name}`"));
            };
            if self.tensors[id.0].shape() != t.shape() {
                return dim_err(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    self.tensors[id.0].shape()
                ));
            }
            self.tensors[id.0].data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

/// A set of parameters sharing one learning rate.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    pub params: Vec<ParamId>,
    pub lr: f64,
}

impl ParamGroup {
    pub fn new(name: impl Into<String>, params: Vec<ParamId>, lr: f64) -> Self {
        ParamGroup {
            name: name.into(),
            params,
            lr,
        }
    }
}

/// Checks that every trainable tensor of `store` is in exactly one group.
pub fn validate_groups(store: &ParamStore, groups: &[ParamGroup]) -> Result<()> {
    let mut seen = HashSet::new();
    for group in groups {
        if !group.lr.is_finite() || group.lr < 0.0 {
            return contract_err(format!("group `{}` has invalid lr {}", group.name, group.lr));
        }
        for &id in &group.params {
            if id.0 >= store.len() {
                return contract_err(format!("group `{}` references unknown parameter", group.name));
            }
            if !seen.insert(id) {
                return contract_err(format!(
                    "parameter `{}` appears in more than one group",
                    store.name(id)
                ));
            }
        }
    }
    if let Some(orphan) = store
        .ids()
        .find(|id| store.get(*id).requires_grad() && !seen.contains(id))
    {
        return contract_err(format!("parameter `{}` belongs to no group", store.name(orphan)));
    }
    Ok(())
}
