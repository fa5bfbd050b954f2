//! Central store of model parameters and non-trainable state buffers.
//!
//! Blocks hold [`ParamId`]s into one store per model. Each forward pass
//! binds the stored tensors onto a fresh tape through a [`TapeBinding`], so
//! the store itself stays immutable during the pass; the optimizer and
//! batch-norm running statistics mutate it between passes.

// float math via the trait: test builds link std, the lib build must not
#[allow(unused_imports)]
use num_traits::Float;
use alloc::string::String;
use alloc::vec::Vec;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::tensor::{fnv1a_f64, BatchStatUpdate, Graph, Tensor, Var};
use crate::Rng;

/// Handle to one entry in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

/// Flat, name-addressed parameter set for one model.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            value,
            trainable: true,
        });
        ParamId(self.entries.len() - 1)
    }

    /// Non-trainable state (e.g. batch-norm running statistics).
    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            value,
            trainable: false,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    /// Count of scalar values across trainable entries.
    pub fn trainable_scalars(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.numel())
            .sum()
    }

    /// Order-sensitive fingerprint over every stored value. Two stores with
    /// bit-identical contents agree; any parameter mutation changes it.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for e in &self.entries {
            h ^= fnv1a_f64(e.value.data());
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }

    /// Apply running-statistics updates recorded by train-mode batch norms.
    pub fn apply_batch_stats(&mut self, updates: Vec<BatchStatUpdate>) {
        for u in updates {
            self.entries[u.mean_key]
                .value
                .data_mut()
                .copy_from_slice(&u.new_mean);
            self.entries[u.var_key]
                .value
                .data_mut()
                .copy_from_slice(&u.new_var);
        }
    }
}

/// Per-tape cache of bound parameter [`Var`]s, so each parameter appears on
/// the tape exactly once per forward pass and its gradient can be collected
/// afterwards.
pub struct TapeBinding {
    slots: Vec<Option<Var>>,
}

impl TapeBinding {
    pub fn new(store: &ParamStore) -> Self {
        TapeBinding {
            slots: alloc::vec![None; store.len()],
        }
    }

    /// Bind (once) and return the tape variable for a parameter. Trainable
    /// entries request gradients; buffers are constants.
    pub fn var(&mut self, g: &mut Graph, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.slots[id.0] {
            return v;
        }
        let entry = &store.entries[id.0];
        let v = g.leaf(entry.value.clone(), entry.trainable);
        self.slots[id.0] = Some(v);
        v
    }

    /// Gradients for every bound trainable parameter, keyed by store index.
    pub fn collect_grads(&self, g: &Graph, store: &ParamStore) -> Vec<Option<Vec<f64>>> {
        self.slots
            .iter()
            .enumerate()
            .map(|(i, slot)| match slot {
                Some(v) if store.entries[i].trainable => g.grad(*v).map(|s| s.to_vec()),
                _ => None,
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// initializers
// ---------------------------------------------------------------------------

/// Uniform in `[-bound, bound]`.
pub fn uniform_init(shape: Vec<usize>, bound: f64, rng: &mut Rng) -> Tensor {
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel)
        .map(|_| rng.random::<f64>() * 2.0 * bound - bound)
        .collect();
    Tensor::new(shape, data).expect("shape/product consistent")
}

/// Glorot-style uniform for a `[fan_in, fan_out]` matrix.
pub fn glorot_init(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform_init(alloc::vec![fan_in, fan_out], bound, rng)
}
