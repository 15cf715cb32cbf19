//! Named parameter storage shared by the network, optimizer and checkpoints.

use std::collections::HashMap;

use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Index of a parameter inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// False for batch-norm running statistics and other buffers the
    /// optimizer must not touch.
    pub trainable: bool,
}

/// Ordered, named parameter tensors. Order is the checkpoint order.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<T> {
    entries: Vec<ParamEntry<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Element> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry {
            name,
            value,
            trainable,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<T>)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e))
    }

    pub fn entries_mut(&mut self) -> impl Iterator<Item = &mut ParamEntry<T>> {
        self.entries.iter_mut()
    }

    /// Total number of scalar elements across all entries.
    pub fn element_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn cast<U: Element>(&self) -> ParamSet<U> {
        let mut out = ParamSet::new();
        for e in &self.entries {
            out.add(e.name.clone(), e.value.cast::<U>(), e.trainable);
        }
        out
    }

    /// Copy values from another set with identical layout.
    pub fn copy_values_from(&mut self, other: &ParamSet<T>) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::ShapeMismatch(format!(
                "parameter sets differ in length: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        for (dst, src) in self.entries.iter_mut().zip(other.entries.iter()) {
            dst.value.require_same_shape(&src.value, &dst.name)?;
            dst.value
                .data_mut()
                .copy_from_slice(src.value.data());
        }
        Ok(())
    }
}

/// Dense gradient buffers, one per parameter (zeros for unused parameters),
/// plus gradients for any tape input that requested them.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    pub by_param: Vec<Tensor<T>>,
    pub by_input: HashMap<usize, Tensor<T>>,
}

impl<T: Element> Gradients<T> {
    pub fn zeros_like(params: &ParamSet<T>) -> Self {
        Gradients {
            by_param: params
                .iter()
                .map(|(_, e)| Tensor::zeros(e.value.shape().to_vec()))
                .collect(),
            by_input: HashMap::new(),
        }
    }

    pub fn param(&self, id: ParamId) -> &Tensor<T> {
        &self.by_param[id.0]
    }

    pub fn accumulate_param(&mut self, id: ParamId, grad: &Tensor<T>) -> Result<()> {
        self.by_param[id.0].axpy(T::one(), grad)
    }
}
