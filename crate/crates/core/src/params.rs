//! Named parameter storage shared by the encoder and decoder.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{bail, Result};
use crate::math;
use crate::tensor::{Shape, Tensor};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimiser.
    Trainable,
    /// State carried alongside the weights (normalisation running stats).
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
}

/// Ordered collection of named tensors. Insertion order is stable, which
/// makes checkpoints and gradient checks reproducible.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: &str, kind: ParamKind, value: Tensor) -> Result<ParamId> {
        if self.find(name).is_some() {
            bail!(Validation, "duplicate parameter name `{name}`");
        }
        self.entries.push(Param {
            name: name.to_string(),
            kind,
            value,
        });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.entries.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn trainable(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.iter()
            .filter(|(_, p)| p.kind == ParamKind::Trainable)
            .map(|(id, _)| id)
    }

    /// Total number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.iter()
            .filter(|(_, p)| p.kind == ParamKind::Trainable)
            .map(|(_, p)| p.value.shape().numel())
            .sum()
    }

    /// Overwrite values from another store with identical names and shapes.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            bail!(
                Validation,
                "parameter count mismatch: expected {}, found {}",
                self.len(),
                other.len()
            );
        }
        for (mine, theirs) in self.entries.iter_mut().zip(&other.entries) {
            if mine.name != theirs.name || mine.value.shape() != theirs.value.shape() {
                bail!(
                    Validation,
                    "parameter `{}` {} does not match `{}` {}",
                    mine.name,
                    mine.value.shape(),
                    theirs.name,
                    theirs.value.shape()
                );
            }
            mine.value = theirs.value.clone();
        }
        Ok(())
    }
}

/// Uniform initialisation in `±1/√fan_in`.
pub fn fan_in_uniform<R: Rng + ?Sized>(shape: Shape, fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / math::sqrt(fan_in.max(1) as f64);
    let data = (0..shape.numel())
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::from_vec(shape, data).expect("length matches shape")
}
