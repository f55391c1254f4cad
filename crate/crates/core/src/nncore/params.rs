use super::{Real, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Initialisation scheme for a new parameter.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    /// Normal with std `sqrt(2 / fan_in)`, scaled by `gain`.
    He { fan_in: usize, gain: f64 },
    Normal(f64),
}

/// Named tensors in insertion order.
#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    decay: Vec<bool>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            decay: Vec::new(),
        }
    }

    /// Adds a tensor. Panics on a duplicate name.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>, decay: bool) -> ParamId {
        let name = name.into();
        assert!(self.index_of(&name).is_none(), "duplicate parameter name {name}");
        self.names.push(name);
        self.tensors.push(t);
        self.decay.push(decay);
        ParamId(self.tensors.len() - 1)
    }

    pub fn init(&mut self, name: impl Into<String>, shape: &[usize], init: Init, decay: bool, rng: &mut impl Rng) -> ParamId {
        let n: usize = shape.iter().product();
        let std = match init {
            Init::Zeros => 0.0,
            Init::He { fan_in, gain } => gain * (2.0 / fan_in.max(1) as f64).sqrt(),
            Init::Normal(s) => s,
        };
        let data = if std == 0.0 {
            vec![T::zero(); n]
        } else {
            let dist = Normal::new(0.0, std).expect("finite std");
            (0..n).map(|_| T::from_f64(dist.sample(rng))).collect()
        };
        self.insert(name, Tensor::new(shape, data), decay)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn decays(&self, id: ParamId) -> bool {
        self.decay[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>, bool)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .zip(&self.decay)
            .map(|((n, t), d)| (n.as_str(), t, *d))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.tensors.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            decay: self.decay.clone(),
        }
    }

    /// True if both stores hold the same names, flags and shapes in the same order.
    pub fn same_layout<U: Real>(&self, other: &ParamStore<U>) -> bool {
        self.names == other.names
            && self.decay == other.decay
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.shape == b.shape)
    }
}

/// Mapping from [`ParamId`] to the tape leaves created by [`super::Tape::bind`].
#[derive(Debug, Clone, Copy)]
pub struct BoundParams {
    base: usize,
    len: usize,
}

impl BoundParams {
    pub(crate) fn new(base: usize, len: usize) -> Self {
        Self { base, len }
    }

    /// Binding over leaves created in store order, e.g. by [`super::grad_check`].
    pub fn contiguous(vars: &[Var]) -> Self {
        let base = vars.first().map_or(0, |v| v.0);
        assert!(vars.iter().enumerate().all(|(i, v)| v.0 == base + i), "leaves are not contiguous");
        Self { base, len: vars.len() }
    }

    pub fn var(&self, id: ParamId) -> Var {
        assert!(id.0 < self.len, "parameter {} not bound", id.0);
        Var(self.base + id.0)
    }

    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        (0..self.len).map(|i| Var(self.base + i))
    }
}
