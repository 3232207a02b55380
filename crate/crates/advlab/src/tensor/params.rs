//! Named parameter collections and the glue between persistent
//! parameter tensors and per-tape variables.
//!
//! Models keep their weights in a [`ParamSet`]; each forward pass binds
//! them onto a fresh [`Tape`], and after backward the gradients are
//! copied back with [`sync_grads`]. `BTreeMap` keeps iteration order
//! deterministic, which keeps training runs reproducible.

use std::collections::btree_map;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use super::{Tensor, TensorError};

/// Named model parameters. Names are hierarchical dotted paths such as
/// `"conv1.weight"` so checkpoints stay self-describing.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamSet {
    params: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        let previous = self.params.insert(name.clone(), tensor);
        assert!(previous.is_none(), "duplicate parameter '{name}'");
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> btree_map::Iter<'_, String, Tensor> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> btree_map::IterMut<'_, String, Tensor> {
        self.params.iter_mut()
    }

    /// Merge another set under a dotted prefix (e.g. nesting an encoder
    /// inside a larger model as `"encoder.*"`).
    pub fn merge_prefixed(&mut self, prefix: &str, other: ParamSet) {
        for (name, tensor) in other.params {
            self.insert(format!("{prefix}.{name}"), tensor);
        }
    }

    /// Split out the subset under a dotted prefix, stripping it.
    pub fn extract_prefixed(&self, prefix: &str) -> ParamSet {
        let full = format!("{prefix}.");
        let params = self
            .params
            .iter()
            .filter_map(|(name, tensor)| {
                name.strip_prefix(&full)
                    .map(|rest| (rest.to_string(), tensor.clone()))
            })
            .collect();
        ParamSet { params }
    }

    pub fn clear_grads(&mut self) {
        for tensor in self.params.values_mut() {
            tensor.clear_grad();
        }
    }

    pub fn ensure_finite(&self, context: &str) -> Result<(), TensorError> {
        for (name, tensor) in &self.params {
            tensor.ensure_finite(&format!("{context} '{name}'"))?;
        }
        Ok(())
    }
}

impl<'a> IntoIterator for &'a ParamSet {
    type Item = (&'a String, &'a Tensor);
    type IntoIter = btree_map::Iter<'a, String, Tensor>;

    fn into_iter(self) -> Self::IntoIter {
        self.params.iter()
    }
}

/// Tape handles for a bound parameter set, keyed by the same names.
#[derive(Debug, Clone, Default)]
pub struct VarSet {
    vars: BTreeMap<String, Var>,
}

impl VarSet {
    /// Handle for a parameter that is known to exist; panics otherwise
    /// because a missing name is a model-definition bug.
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter '{name}'"))
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> btree_map::Iter<'_, String, Var> {
        self.vars.iter()
    }

    /// View of the handles under a dotted prefix, with the prefix
    /// stripped — lets a sub-model forward pass run against parameters
    /// that were merged into a larger set.
    pub fn scoped(&self, prefix: &str) -> VarSet {
        let full = format!("{prefix}.");
        let vars = self
            .vars
            .iter()
            .filter_map(|(name, &var)| name.strip_prefix(&full).map(|rest| (rest.to_string(), var)))
            .collect();
        VarSet { vars }
    }
}

/// Copy every parameter onto `tape` as a leaf. With `trainable` false
/// the leaves are constants (frozen weights): backward skips them.
pub fn bind_params(tape: &mut Tape, params: &ParamSet, trainable: bool) -> VarSet {
    let vars = params
        .iter()
        .map(|(name, tensor)| (name.clone(), tape.input(tensor, trainable)))
        .collect();
    VarSet { vars }
}

/// After a backward pass, copy gradients from the tape back into the
/// parameter tensors (accumulating, so several tapes can contribute to
/// one update). Every bound parameter must have received a gradient.
pub fn sync_grads(tape: &Tape, vars: &VarSet, params: &mut ParamSet) -> Result<(), TensorError> {
    for (name, &var) in vars.iter() {
        let grad = tape
            .grad(var)
            .ok_or_else(|| TensorError::MissingGradient { name: name.clone() })?;
        let tensor = params
            .get_mut(name)
            .ok_or_else(|| TensorError::MissingGradient { name: name.clone() })?;
        tensor.accumulate_grad(grad);
    }
    Ok(())
}

/// After a backward pass, pull the gradients of every bound parameter
/// off the tape, keyed by name (the per-example form consumed by
/// [`super::batch_mean_grads`]).
pub fn collect_grads(
    tape: &Tape,
    vars: &VarSet,
) -> Result<BTreeMap<String, Vec<f64>>, TensorError> {
    vars.iter()
        .map(|(name, &var)| {
            tape.grad(var)
                .map(|g| (name.clone(), g.to_vec()))
                .ok_or_else(|| TensorError::MissingGradient { name: name.clone() })
        })
        .collect()
}
