//! Named parameter storage and the binding of parameters onto a tape.
//!
//! Models declare their parameters (name, shape, initializer) up front.
//! Declaring does not allocate, so parameter counts of the large
//! configurations can be queried without materializing them.

use std::cell::RefCell;
use std::collections::HashMap;
use std::ops::Deref;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::tape::{Gradients, Tape, Var};
use super::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Glorot uniform over a `fan_in x fan_out` matrix.
    Xavier,
    Normal(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    specs: Vec<ParamSpec>,
    values: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { specs: Vec::new(), values: Vec::new(), index: HashMap::new() }
    }

    /// Registers a parameter. Panics on a duplicate name: two modules
    /// claiming the same name is a construction bug.
    pub fn declare(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        self.index.insert(name.clone(), self.specs.len());
        self.specs.push(ParamSpec { name, shape: shape.to_vec(), init });
        ParamId(self.specs.len() - 1)
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    /// Total number of scalar parameters, whether or not materialized.
    pub fn num_params(&self) -> usize {
        self.specs.iter().map(ParamSpec::numel).sum()
    }

    /// Number of scalars in parameters whose name starts with `prefix`.
    pub fn num_params_with_prefix(&self, prefix: &str) -> usize {
        self.specs.iter().filter(|s| s.name.starts_with(prefix)).map(ParamSpec::numel).sum()
    }

    pub fn is_materialized(&self) -> bool {
        self.values.len() == self.specs.len()
    }

    /// Draws every parameter from its initializer, in declaration order.
    pub fn initialize(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.values = self.specs.iter().map(|s| sample_init(s, &mut rng)).collect();
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn id_at(&self, index: usize) -> ParamId {
        ParamId(index)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.specs.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.specs[id.0].name
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    /// Replaces a parameter value; the shape must match the declaration.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> crate::Result<()> {
        if value.shape() != self.specs[id.0].shape.as_slice() {
            crate::error::bail!(
                Argument,
                "parameter {} expects shape {:?}, got {:?}",
                self.specs[id.0].name,
                self.specs[id.0].shape,
                value.shape()
            );
        }
        self.values[id.0] = value;
        Ok(())
    }
}

fn sample_init<T: Real>(spec: &ParamSpec, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let n = spec.numel();
    let data: Vec<T> = match spec.init {
        Init::Zeros => vec![T::zero(); n],
        Init::Ones => vec![T::one(); n],
        Init::Xavier => {
            let fan_in = spec.shape[0];
            let fan_out = spec.shape[1..].iter().product::<usize>().max(1);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            (0..n).map(|_| T::c(rng.random_range(-bound..bound))).collect()
        }
        Init::Normal(std) => {
            let dist = Normal::new(0.0, std).expect("valid std");
            (0..n).map(|_| T::c(dist.sample(rng))).collect()
        }
    };
    Tensor::from_parts(spec.shape.clone(), data)
}

/// A tape plus lazily-bound parameter leaves.
pub struct Graph<'a, T: Real> {
    tape: Tape<T>,
    store: &'a ParamStore<T>,
    bound: RefCell<Vec<Option<Var>>>,
}

impl<'a, T: Real> Graph<'a, T> {
    pub fn new(store: &'a ParamStore<T>) -> Self {
        assert!(store.is_materialized(), "parameters must be initialized before use");
        Self { tape: Tape::new(), store, bound: RefCell::new(vec![None; store.len()]) }
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    /// The tape leaf for a parameter, created on first use.
    pub fn param(&self, id: ParamId) -> Var {
        if let Some(v) = self.bound.borrow()[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.store.get(id).clone());
        self.bound.borrow_mut()[id.0] = Some(v);
        v
    }

    /// Per-parameter gradients in declaration order; unused parameters get zeros.
    pub fn param_grads(&self, grads: &mut Gradients<T>) -> Vec<Tensor<T>> {
        let bound = self.bound.borrow();
        self.store
            .ids()
            .map(|id| {
                bound[id.0]
                    .and_then(|v| grads.take(v))
                    .unwrap_or_else(|| Tensor::zeros(&self.store.specs[id.0].shape))
            })
            .collect()
    }

    pub fn backward_params(&self, loss: Var) -> crate::Result<Vec<Tensor<T>>> {
        let mut grads = self.tape.backward(loss)?;
        Ok(self.param_grads(&mut grads))
    }
}

impl<T: Real> Deref for Graph<'_, T> {
    type Target = Tape<T>;

    fn deref(&self) -> &Tape<T> {
        &self.tape
    }
}
