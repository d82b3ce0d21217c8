//! Named parameter storage.
//!
//! Every weight lives in a [`ParameterStore`] under a dotted path such as
//! `heads.hsi.stem1.w`. Stores keep insertion order so checkpoints and
//! parameter counts are reproducible, and each store carries a process-unique
//! id so gradients from one graph can be routed back to the right arrays.

use std::sync::atomic::{AtomicU32, Ordering};

use indexmap::IndexMap;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use super::Tensor;
use crate::{Error, Result};

static NEXT_STORE_ID: AtomicU32 = AtomicU32::new(1);

/// Identifies one array inside one store instance. Only meaningful within a
/// single process; checkpoints use store labels and entry names instead.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamKey {
    pub store: u32,
    pub index: usize,
}

/// One named array: the value plus whether the optimizer may touch it.
/// Non-learnable entries are buffers (batch-norm running statistics,
/// preprocessing constants) that still persist in checkpoints.
#[derive(Debug, Clone)]
pub struct Entry {
    pub value: Tensor,
    pub learnable: bool,
}

/// An ordered map of named tensors with a stable label (used in checkpoints)
/// and a process-unique id (used to route gradients).
#[derive(Debug)]
pub struct ParameterStore {
    id: u32,
    label: String,
    entries: IndexMap<String, Entry>,
}

impl ParameterStore {
    pub fn new(label: impl Into<String>) -> Self {
        ParameterStore {
            id: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            label: label.into(),
            entries: IndexMap::new(),
        }
    }

    pub fn id(&self) -> u32 {
        self.id
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// Inserts a new entry; names must be unique within the store.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, learnable: bool) {
        let name = name.into();
        let prev = self.entries.insert(name.clone(), Entry { value, learnable });
        assert!(prev.is_none(), "duplicate parameter name {name}");
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self
            .entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {}.{name}", self.label))
            .value
    }

    /// Replaces the value of an existing entry, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) {
        let entry = self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        assert_eq!(entry.value.dim(), value.dim(), "shape change for {name}");
        entry.value = value;
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Index of a name within the store, for building [`ParamKey`]s.
    pub fn index_of(&self, name: &str) -> usize {
        self.entries
            .get_index_of(name)
            .unwrap_or_else(|| panic!("unknown parameter {}.{name}", self.label))
    }

    pub fn key(&self, name: &str) -> ParamKey {
        ParamKey {
            store: self.id,
            index: self.index_of(name),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Entry)> {
        self.entries.iter()
    }

    pub fn entry_at(&self, index: usize) -> (&String, &Entry) {
        let (name, entry) = self.entries.get_index(index).expect("entry index in range");
        (name, entry)
    }

    pub fn entry_at_mut(&mut self, index: usize) -> (&String, &mut Entry) {
        let (name, entry) = self
            .entries
            .get_index_mut(index)
            .expect("entry index in range");
        (name, entry)
    }

    /// Number of learnable scalars in the store.
    pub fn learnable_count(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.learnable)
            .map(|e| e.value.len())
            .sum()
    }

    /// Restores a value by name when loading a checkpoint; the shape on disk
    /// must match the freshly built model.
    pub fn restore(&mut self, name: &str, value: Tensor) -> Result<()> {
        let entry = self.entries.get_mut(name).ok_or_else(|| {
            Error::Integrity(format!(
                "checkpoint entry {}.{name} does not exist in the model",
                self.label
            ))
        })?;
        if entry.value.dim() != value.dim() {
            return Err(Error::Integrity(format!(
                "checkpoint entry {}.{name} has shape {:?}, model expects {:?}",
                self.label,
                value.dim(),
                entry.value.dim()
            )));
        }
        entry.value = value;
        Ok(())
    }
}

/// He-normal initialisation for a conv kernel `[OC, IC, K, K]` (fan-in =
/// IC*K*K). Transposed-conv kernels `[IC, OC, K, K]` pass the same fan-in.
pub fn he_normal(
    rng: &mut ChaCha20Rng,
    shape: (usize, usize, usize, usize),
    fan_in: usize,
) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("std is finite");
    let len = shape.0 * shape.1 * shape.2 * shape.3;
    let data: Vec<f64> = (0..len).map(|_| normal.sample(rng)).collect();
    Tensor::from_shape_vec(shape, data).expect("shape matches length")
}
