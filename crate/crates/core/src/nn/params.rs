//! Named trainable parameters and their gradients.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;

/// One named trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
}

/// Ordered collection of parameters with unique names. Insertion order is
/// the canonical order used by optimizers, checkpoints and digests.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    items: Vec<Parameter>,
    by_name: BTreeMap<String, usize>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<usize> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        let idx = self.items.len();
        self.by_name.insert(name.clone(), idx);
        self.items.push(Parameter { name, value });
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.items[i].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = self.index_of(name)?;
        Some(&mut self.items[i].value)
    }

    pub fn at(&self, idx: usize) -> &Parameter {
        &self.items[idx]
    }

    pub fn at_mut(&mut self, idx: usize) -> &mut Parameter {
        &mut self.items[idx]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.items.iter()
    }

    /// Total number of scalar entries across all parameters.
    pub fn total_len(&self) -> usize {
        self.items.iter().map(|p| p.value.len()).sum()
    }

    /// SHA-256 over names, shapes and exact f64 bit patterns; equal digests
    /// mean bitwise-identical parameter sets.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for p in &self.items {
            h.update(p.name.as_bytes());
            h.update([0u8]);
            for d in &p.value.shape {
                h.update((*d as u64).to_le_bytes());
            }
            for v in &p.value.data {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().into()
    }
}

/// Per-parameter gradient slots produced by a backward pass. A slot is None
/// when the parameter did not participate in the loss.
#[derive(Clone, Debug)]
pub struct Grads {
    pub(crate) slots: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn empty(n_params: usize) -> Self {
        Self {
            slots: vec![None; n_params],
        }
    }

    pub fn get(&self, idx: usize) -> Option<&Tensor> {
        self.slots.get(idx).and_then(|s| s.as_ref())
    }

    pub fn by_name<'a>(&'a self, params: &Params, name: &str) -> Option<&'a Tensor> {
        self.get(params.index_of(name)?)
    }

    pub(crate) fn accumulate(&mut self, idx: usize, g: &Tensor) {
        match &mut self.slots[idx] {
            Some(t) => {
                for (a, b) in t.data.iter_mut().zip(&g.data) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g.clone()),
        }
    }
}

/// Glorot/Xavier uniform initialization in +-sqrt(6 / (fan_in + fan_out)).
pub fn glorot_uniform(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let len: usize = shape.iter().product();
    let data = (0..len).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::from_vec(shape, data)
}
