use std::ops::Index;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::graph::{Gradients, Graph, Var};
use super::tensor::Tensor;

/// Index of a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamId(usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Flat, ordered collection of named weight tensors. Model layouts hold
/// [`ParamId`]s into it; optimisers and checkpoints work on the flat list.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            tensor,
            trainable: true,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Freezes or unfreezes every entry whose name starts with `prefix`.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for e in self.entries.iter_mut().filter(|e| e.name.starts_with(prefix)) {
            e.trainable = trainable;
        }
    }

    /// Places every tensor on `g`: trainable entries as tracked leaves,
    /// frozen ones as constants.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|e| {
                if e.trainable {
                    g.param(e.tensor.clone())
                } else {
                    g.constant(e.tensor.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// Places every tensor on `g` as a constant, for inference.
    pub fn bind_constants(&self, g: &mut Graph) -> Bound {
        let vars = self.entries.iter().map(|e| g.constant(e.tensor.clone())).collect();
        Bound { vars }
    }

    /// Gradients aligned with the store; `None` for frozen entries or
    /// entries the loss does not reach.
    pub fn collect_grads(&self, bound: &Bound, grads: &mut Gradients) -> Vec<Option<Tensor>> {
        self.entries
            .iter()
            .zip(&bound.vars)
            .map(|(e, &v)| if e.trainable { grads.take(v) } else { None })
            .collect()
    }

    /// Checks that `other` has identical names and shapes.
    pub fn check_compatible(&self, other: &ParamStore) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter groups, found {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for (a, b) in self.entries.iter().zip(&other.entries) {
            if a.name != b.name || a.tensor.shape() != b.tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} {} does not match {} {}",
                    a.name,
                    a.tensor.shape(),
                    b.name,
                    b.tensor.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Graph handles for a bound [`ParamStore`], indexable by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps leaves created elsewhere, one per store entry in order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

/// Sums per-chunk gradient vectors in order.
pub fn accumulate_grads(acc: &mut Vec<Option<Tensor>>, other: Vec<Option<Tensor>>) {
    if acc.is_empty() {
        *acc = other;
        return;
    }
    for (a, o) in acc.iter_mut().zip(other) {
        match (a.as_mut(), o) {
            (Some(a), Some(o)) => a.add_assign(&o),
            (None, Some(o)) => *a = Some(o),
            _ => {}
        }
    }
}
