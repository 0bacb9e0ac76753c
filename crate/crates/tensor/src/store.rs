//! Named storage for trainable parameters and non-trainable buffers.

use std::collections::HashMap;

use crate::TensorError;

/// Index of an entry in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EntryKind {
    /// Updated by the optimizer.
    Parameter,
    /// Updated in the forward pass (batch-norm running statistics).
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: EntryKind,
    pub data: Vec<f64>,
    /// Accumulated gradient; empty until the first backward pass touches the entry.
    pub grad: Vec<f64>,
}

impl Entry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Flat registry of every tensor a model owns, addressable by id or by dotted name.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, shape: &[usize], kind: EntryKind, data: Vec<f64>) -> Result<ParamId, TensorError> {
        let name = name.into();
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(TensorError::Shape(format!("{name}: {} values for shape {shape:?}", data.len())));
        }
        if self.by_name.contains_key(&name) {
            return Err(TensorError::DuplicateName(name));
        }
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(Entry { name, shape: shape.to_vec(), kind, data, grad: Vec::new() });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &Entry {
        &self.entries[id.0]
    }

    pub fn entry_mut(&mut self, id: ParamId) -> &mut Entry {
        &mut self.entries[id.0]
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [Entry] {
        &mut self.entries
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn data(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].data
    }

    pub fn data_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.entries[id.0].data
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].grad
    }

    /// Number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.entries.iter().filter(|e| e.kind == EntryKind::Parameter).map(Entry::numel).sum()
    }

    /// Number of trainable scalars whose name starts with `prefix`.
    pub fn parameter_count_under(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == EntryKind::Parameter && e.name.starts_with(prefix))
            .map(Entry::numel)
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad.clear();
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &[f64]) {
        let e = &mut self.entries[id.0];
        if e.grad.is_empty() {
            e.grad = g.to_vec();
        } else {
            for (a, b) in e.grad.iter_mut().zip(g) {
                *a += b;
            }
        }
    }
}
