//! Named parameter storage, kept outside any graph.
//!
//! Each training step inserts the parameters as leaves into a fresh graph,
//! reads gradients back after `backward`, and updates the store. Entry
//! order is fixed at construction, which keeps checkpoints byte-stable.

use std::collections::HashMap;

use crate::error::{PenError, Result};
use crate::tensor::checkpoint::NamedTensor;
use crate::tensor::{Graph, Scalar, TensorRef};

#[derive(Debug, Clone)]
pub struct ParamEntry<F: Scalar> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<F: Scalar> {
    entries: Vec<ParamEntry<F>>,
    index: HashMap<String, usize>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new(), index: HashMap::new() }
    }

    pub fn insert(&mut self, name: &str, shape: Vec<usize>, data: Vec<F>) {
        assert_eq!(data.len(), shape.iter().product::<usize>(), "param {name} shape/data mismatch");
        assert!(!self.index.contains_key(name), "duplicate param {name}");
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry { name: name.to_string(), shape, data });
    }

    pub fn entries(&self) -> &[ParamEntry<F>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<F>] {
        &mut self.entries
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry<F>> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    /// Insert every parameter as a `requires_grad` leaf of `g`.
    pub fn bind(&self, g: &mut Graph<F>) -> Bindings {
        let mut map = HashMap::new();
        for e in &self.entries {
            map.insert(e.name.clone(), g.leaf(&e.shape, e.data.clone(), true));
        }
        Bindings { map }
    }

    pub fn to_named_tensors(&self) -> Vec<NamedTensor> {
        self.entries
            .iter()
            .map(|e| NamedTensor {
                name: e.name.clone(),
                shape: e.shape.clone(),
                data: e.data.iter().map(|v| v.to_f32c()).collect(),
            })
            .collect()
    }

    /// Overwrite values from a checkpoint. Names and shapes must match the
    /// store exactly.
    pub fn load_named_tensors(&mut self, tensors: &[NamedTensor]) -> Result<()> {
        if tensors.len() != self.entries.len() {
            return Err(PenError::Checkpoint(format!(
                "checkpoint has {} tensors, model expects {}",
                tensors.len(),
                self.entries.len()
            )));
        }
        for t in tensors {
            let idx = *self.index.get(&t.name).ok_or_else(|| {
                PenError::Checkpoint(format!("checkpoint tensor {:?} not in model", t.name))
            })?;
            let e = &mut self.entries[idx];
            if e.shape != t.shape {
                return Err(PenError::Checkpoint(format!(
                    "tensor {}: checkpoint shape {:?} vs model {:?}",
                    t.name, t.shape, e.shape
                )));
            }
            e.data = t.data.iter().map(|&v| F::from_f32c(v)).collect();
        }
        Ok(())
    }
}

/// Xavier-uniform initialization for an affine weight.
pub fn xavier<F: Scalar>(rng: &mut impl rand::Rng, fan_in: usize, fan_out: usize) -> Vec<F> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..fan_in * fan_out).map(|_| F::from_f64c(rng.gen_range(-limit..limit))).collect()
}

/// Small uniform initialization for embedding-style tables.
pub fn uniform<F: Scalar>(rng: &mut impl rand::Rng, count: usize, limit: f64) -> Vec<F> {
    (0..count).map(|_| F::from_f64c(rng.gen_range(-limit..limit))).collect()
}

/// Graph handles for one step's bound parameters.
#[derive(Debug, Clone)]
pub struct Bindings {
    map: HashMap<String, TensorRef>,
}

impl Bindings {
    pub fn get(&self, name: &str) -> TensorRef {
        *self.map.get(name).unwrap_or_else(|| panic!("unbound param {name}"))
    }

    pub fn try_get(&self, name: &str) -> Option<TensorRef> {
        self.map.get(name).copied()
    }
}
