//! Named parameter storage shared by models and the optimizer.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::DuplicateParam(name));
        }
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(value);
        Ok(id)
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

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    /// Replaces every tensor with `values`, checking shapes.
    pub fn assign(&mut self, values: &[Tensor]) -> Result<()> {
        if values.len() != self.tensors.len() {
            return Err(Error::Shape(format!(
                "expected {} tensors, got {}",
                self.tensors.len(),
                values.len()
            )));
        }
        for (dst, src) in self.tensors.iter_mut().zip(values) {
            dst.expect_same_shape(src)?;
            dst.clone_from(src);
        }
        Ok(())
    }

    /// Overwrites the named tensor, checking the shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        self.tensors[id.0].expect_same_shape(&value)?;
        self.tensors[id.0] = value;
        Ok(())
    }
}

/// Gradients produced by [`Graph::backward`](crate::Graph::backward).
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    pub(crate) params: HashMap<ParamId, Tensor>,
    pub(crate) leaves: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    /// Gradient of a non-parameter leaf created with
    /// [`Graph::leaf`](crate::Graph::leaf).
    pub fn leaf(&self, var: crate::Var) -> Option<&Tensor> {
        self.leaves.get(&var.0)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    /// Euclidean norm over all parameter gradients.
    pub fn global_norm(&self) -> f64 {
        let mut ids: Vec<_> = self.params.keys().copied().collect();
        ids.sort();
        ids.iter()
            .map(|id| self.params[id].sum_sq())
            .sum::<f64>()
            .sqrt()
    }

    pub(crate) fn scale(&mut self, factor: f64) {
        for g in self.params.values_mut() {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }
}
