//! Named parameter storage and per-tape binding.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{config, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    value: Arc<Tensor>,
}

/// Ordered set of trainable tensors. Insertion order fixes both the
/// checkpoint layout and the gradient reduction order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        self.entries.push(Entry {
            name,
            value: Arc::new(value),
        });
        ParamId(id)
    }

    /// Glorot-uniform matrix.
    pub fn glorot(&mut self, name: impl Into<String>, rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> ParamId {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.gen_range(-limit..limit)).collect();
        self.insert(name, Tensor::matrix(rows, cols, data).expect("sized"))
    }

    pub fn normal_matrix(&mut self, name: impl Into<String>, rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> ParamId {
        use rand_distr::{Distribution, Normal};
        let n = Normal::new(0.0, std).expect("valid std");
        let data = (0..rows * cols).map(|_| n.sample(rng)).collect();
        self.insert(name, Tensor::matrix(rows, cols, data).expect("sized"))
    }

    pub fn zeros(&mut self, name: impl Into<String>, len: usize) -> ParamId {
        self.insert(name, Tensor::zeros(&[len]))
    }

    pub fn ones(&mut self, name: impl Into<String>, len: usize) -> ParamId {
        self.insert(name, Tensor::full(&[len], 1.0))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn shared(&self, id: ParamId) -> Arc<Tensor> {
        Arc::clone(&self.entries[id.0].value)
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.entries[id.0].value)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|e| (e.name.as_str(), &*e.value))
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Overwrites values by name from `other`; shapes and names must match.
    pub fn load_from(&mut self, named: &[(String, Tensor)]) -> Result<()> {
        if named.len() != self.entries.len() {
            return Err(config(format!(
                "checkpoint has {} tensors, model expects {}",
                named.len(),
                self.entries.len()
            )));
        }
        for (name, t) in named {
            let id = self.id(name).ok_or_else(|| config(format!("unknown parameter {name}")))?;
            if self.get(id).shape() != t.shape() {
                return Err(config(format!(
                    "parameter {name}: shape {:?} vs checkpoint {:?}",
                    self.get(id).shape(),
                    t.shape()
                )));
            }
            *self.get_mut(id) = t.clone();
        }
        Ok(())
    }
}

/// Lazily binds store parameters as leaves of one tape.
pub struct Binder<'t, 'p> {
    tape: &'t Tape,
    store: &'p ParamStore,
    trainable: bool,
    bound: RefCell<Vec<Option<Var<'t>>>>,
}

impl<'t, 'p> Binder<'t, 'p> {
    /// `trainable = false` binds constants (inference).
    pub fn new(tape: &'t Tape, store: &'p ParamStore, trainable: bool) -> Self {
        Self {
            tape,
            store,
            trainable,
            bound: RefCell::new(vec![None; store.len()]),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn var(&self, id: ParamId) -> Var<'t> {
        let mut bound = self.bound.borrow_mut();
        *bound[id.0].get_or_insert_with(|| self.tape.leaf_shared(self.store.shared(id), self.trainable))
    }

    /// Gradients of every bound parameter after `tape.backward`; unbound or
    /// unreached parameters yield zeros.
    pub fn gradients(&self) -> Vec<Tensor> {
        let bound = self.bound.borrow();
        self.store
            .ids()
            .map(|id| {
                bound[id.0]
                    .and_then(|v| v.grad())
                    .unwrap_or_else(|| Tensor::zeros(self.store.get(id).shape()))
            })
            .collect()
    }
}
