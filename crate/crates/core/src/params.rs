//! Named parameter storage shared by the models.
//!
//! Parameters live in insertion order; staging onto a [`Tape`] pushes them as
//! the first leaves in that same order, so parameter index == node id. The
//! ordering is part of the checkpoint contract: save/load round-trips bitwise.

use crate::error::{CoreError, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use std::collections::HashMap;

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

/// Node ids of staged parameters, index-aligned with the store.
pub struct Staged {
    pub ids: Vec<NodeId>,
}

impl Staged {
    pub fn id(&self, param: usize) -> NodeId {
        self.ids[param]
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> usize {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter `{name}`"
        );
        let idx = self.tensors.len();
        self.index.insert(name.to_string(), idx);
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        idx
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count across all parameters.
    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn get(&self, idx: usize) -> &Tensor {
        &self.tensors[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.tensors[idx]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(|s| s.as_str())
    }

    /// Push every parameter onto `tape` as a leaf, in insertion order.
    pub fn stage(&self, tape: &mut Tape, trainable: bool) -> Staged {
        let ids = self
            .tensors
            .iter()
            .map(|t| tape.leaf(t.clone(), trainable))
            .collect();
        Staged { ids }
    }

    /// Flatten all parameters into one vector (insertion order).
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_scalars());
        for t in &self.tensors {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Overwrite all parameters from a flat vector produced by [`Self::to_flat`].
    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_scalars() {
            return Err(CoreError::ShapeMismatch(format!(
                "flat parameter vector has {} scalars, store expects {}",
                flat.len(),
                self.n_scalars()
            )));
        }
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// (name, tensor) pairs in insertion order, for checkpoint serialization.
    pub fn entries(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|s| s.as_str()).zip(self.tensors.iter())
    }

    /// Replace stored values from named entries. Every parameter must be
    /// present with a matching shape; extra names are an error.
    pub fn load_entries(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        if entries.len() != self.tensors.len() {
            return Err(CoreError::ShapeMismatch(format!(
                "checkpoint holds {} tensors, model has {}",
                entries.len(),
                self.tensors.len()
            )));
        }
        for (name, tensor) in entries {
            let idx = *self.index.get(name).ok_or_else(|| {
                CoreError::ShapeMismatch(format!("checkpoint tensor `{name}` not in model"))
            })?;
            if self.tensors[idx].shape() != tensor.shape() {
                return Err(CoreError::ShapeMismatch(format!(
                    "parameter `{name}`: checkpoint shape {:?}, model shape {:?}",
                    tensor.shape(),
                    self.tensors[idx].shape()
                )));
            }
            self.tensors[idx] = tensor.clone();
        }
        Ok(())
    }
}
