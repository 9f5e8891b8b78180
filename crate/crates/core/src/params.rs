//! Named parameter storage and the per-pass binding onto a tape.

use std::cell::RefCell;
use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered table of named tensors. Order is registration order and is stable
/// across save/load.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Tensor>,
    trainable: Vec<bool>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
        self.trainable.push(true);
        ParamId(self.names.len() - 1)
    }

    pub fn add_randn<R: Rng + ?Sized>(&mut self, name: impl Into<String>, shape: &[usize], std: f64, rng: &mut R) -> ParamId {
        self.add(name, Tensor::randn(shape, std, rng))
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn add_full(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> ParamId {
        self.add(name, Tensor::full(shape, value))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    /// Replaces a value, keeping the shape contract.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return Err(Error::dim("ParamSet::set", self.values[id.0].shape(), value.shape()));
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.trainable[id.0] = trainable;
    }

    /// Freezes every parameter except those for which `keep` returns true.
    pub fn freeze_all_except(&mut self, keep: impl Fn(&str) -> bool) {
        for (name, t) in self.names.iter().zip(self.trainable.iter_mut()) {
            *t = keep(name);
        }
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }
}

/// Binds parameters onto one tape, registering each at most once so that
/// repeated uses accumulate into a single gradient.
pub struct Graph<'t, 'p> {
    tape: &'t Tape,
    params: &'p ParamSet,
    bound: RefCell<Vec<Option<Var<'t>>>>,
}

impl<'t, 'p> Graph<'t, 'p> {
    pub fn new(tape: &'t Tape, params: &'p ParamSet) -> Self {
        Self {
            tape,
            params,
            bound: RefCell::new(vec![None; params.len()]),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    pub fn param(&self, id: ParamId) -> Var<'t> {
        let mut bound = self.bound.borrow_mut();
        *bound[id.0].get_or_insert_with(|| {
            self.tape
                .leaf(self.params.get(id).clone(), self.params.is_trainable(id))
        })
    }

    pub fn constant(&self, value: Tensor) -> Var<'t> {
        self.tape.constant(value)
    }

    /// Gradients for every parameter in `ParamSet` order. Parameters that were
    /// unused, frozen, or not upstream of the loss get zeros.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Tensor> {
        let bound = self.bound.borrow();
        self.params
            .ids()
            .map(|id| {
                bound[id.0]
                    .and_then(|v| grads.get_id(v.id()).cloned())
                    .unwrap_or_else(|| Tensor::zeros(self.params.get(id).shape()))
            })
            .collect()
    }

    /// Whether a parameter participated in this pass.
    pub fn was_used(&self, id: ParamId) -> bool {
        self.bound.borrow()[id.0].is_some()
    }
}
