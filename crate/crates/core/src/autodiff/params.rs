use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tape::{Gradients, Tape};
use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub(crate) value: Arc<Vec<f64>>,
}

impl Param {
    pub fn value(&self) -> &[f64] {
        &self.value
    }
}

/// Named learnable arrays in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], value: Vec<f64>) -> ParamId {
        let name = name.into();
        assert_eq!(numel(shape), value.len(), "parameter `{name}` shape/data mismatch");
        assert!(self.find(&name).is_none(), "duplicate parameter `{name}`");
        self.params.push(Param {
            name,
            shape: shape.to_vec(),
            value: Arc::new(value),
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_normal<R: Rng>(&mut self, name: impl Into<String>, shape: &[usize], std: f64, rng: &mut R) -> ParamId {
        let dist = Normal::new(0.0, std).expect("finite std");
        let value = (0..numel(shape)).map(|_| dist.sample(rng)).collect();
        self.add(name, shape, value)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, shape, vec![0.0; numel(shape)])
    }

    pub fn add_ones(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, shape, vec![1.0; numel(shape)])
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: Vec<f64>) -> Result<()> {
        let p = &mut self.params[id.0];
        if value.len() != p.value.len() {
            return Err(Error::shape("set_param", &p.shape, &[value.len()]));
        }
        p.value = Arc::new(value);
        Ok(())
    }

    pub(crate) fn value_mut(&mut self, id: ParamId) -> &mut Vec<f64> {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    /// Every parameter as a tensor on `tape`, indexed by [`ParamId`]. Tracked
    /// when the tape records.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Tensor> {
        self.params
            .iter()
            .map(|p| tape.leaf_shared(Arc::clone(&p.value), p.shape.clone()))
            .collect()
    }
}

/// Dense per-parameter gradients, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct ParamGrads {
    grads: Vec<Option<Vec<f64>>>,
}

impl ParamGrads {
    pub fn empty(store: &ParamStore) -> Self {
        Self {
            grads: vec![None; store.len()],
        }
    }

    /// Collects gradients for tensors produced by [`ParamStore::bind`];
    /// parameters that did not influence the loss receive zeros.
    pub fn collect(grads: &Gradients, bound: &[Tensor]) -> Self {
        Self {
            grads: bound.iter().map(|t| Some(grads.get_or_zeros(t))).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.grads.get(id.0)?.as_deref()
    }

    pub fn set(&mut self, id: ParamId, g: Vec<f64>) {
        self.grads[id.0] = Some(g);
    }

    /// Adds `other` into `self` parameter by parameter.
    pub fn accumulate(&mut self, other: &ParamGrads) {
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(t) = theirs {
                match mine {
                    Some(m) => m.iter_mut().zip(t).for_each(|(a, b)| *a += b),
                    None => *mine = Some(t.clone()),
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bind_tracks_only_on_recording_tapes() {
        let mut store = ParamStore::new();
        store.add_ones("w", &[2, 2]);
        let mut tape = Tape::new();
        assert!(store.bind(&mut tape)[0].requires_grad());
        let mut tape = Tape::inference();
        assert!(!store.bind(&mut tape)[0].requires_grad());
        assert_eq!(store.num_scalars(), 4);
    }
}
