//! Named parameter tensors and their gradients.

use std::collections::BTreeMap;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Ordered collection of named trainable tensors.
///
/// Insertion order is stable, so two stores built by the same code path list
/// their tensors identically; checkpoints rely on that.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: IndexMap<String, Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. Re-registering a name is a programming error.
    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        let (idx, old) = self.tensors.insert_full(name.clone(), value);
        assert!(old.is_none(), "parameter `{name}` registered twice");
        ParamId(idx)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.tensors.get_index_of(name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Matrix> {
        self.tensors.get(name)
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.tensors
            .get_index(id.0)
            .map(|(k, _)| k.as_str())
            .expect("valid parameter id")
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Matrix)> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, (k, v))| (ParamId(i), k.as_str(), v))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    /// Replaces the tensor called `name`, requiring identical shape.
    pub fn assign(&mut self, name: &str, value: &Matrix) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        if slot.shape() != value.shape() {
            return Err(Error::Shape {
                name: name.to_string(),
                expected: slot.shape(),
                found: value.shape(),
            });
        }
        slot.clone_from(value);
        Ok(())
    }

    /// Copies every tensor of `self` whose name starts with `prefix` from `src`.
    pub fn copy_prefix_from(&mut self, src: &ParamStore, prefix: &str) -> Result<usize> {
        let names: Vec<String> = self
            .tensors
            .keys()
            .filter(|k| k.starts_with(prefix))
            .cloned()
            .collect();
        for name in &names {
            let value = src
                .by_name(name)
                .ok_or_else(|| Error::MissingTensor(name.clone()))?;
            self.assign(name, value)?;
        }
        Ok(names.len())
    }

    pub fn all_finite(&self) -> std::result::Result<(), String> {
        match self.tensors.iter().find(|(_, m)| !m.is_finite()) {
            Some((name, _)) => Err(name.clone()),
            None => Ok(()),
        }
    }
}

/// Gradients keyed by parameter, produced by [`crate::autodiff::Graph::backward`].
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: BTreeMap<ParamId, Matrix>,
}

impl Gradients {
    pub(crate) fn insert(&mut self, id: ParamId, g: Matrix) {
        self.grads.insert(id, g);
    }

    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.grads.get(&id)
    }

    pub fn get_mut(&mut self, id: ParamId) -> Option<&mut Matrix> {
        self.grads.get_mut(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Matrix)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Fails with the name of the first parameter whose gradient is not finite.
    pub fn check_finite(&self, store: &ParamStore) -> Result<()> {
        for (id, g) in &self.grads {
            if !g.is_finite() {
                return Err(Error::NonFinite(store.name(*id).to_string()));
            }
        }
        Ok(())
    }
}
