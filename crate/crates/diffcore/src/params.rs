use std::collections::BTreeMap;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Frozen parameters never receive gradients and are skipped by optimizers.
    pub frozen: bool,
}

/// Owns every parameter of a model; layers refer to entries by [`ParamId`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.params.push(Param { name: name.into(), value, frozen: false });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.params[id.0].frozen = frozen;
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Same names, values and frozen flags at another precision.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore { params: self.params.iter().map(|p| Param { name: p.name.clone(), value: p.value.cast(), frozen: p.frozen }).collect() }
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Gradients from one backward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients<T> {
    pub(crate) params: BTreeMap<ParamId, Tensor<T>>,
    pub(crate) inputs: BTreeMap<usize, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id)
    }

    pub fn input(&self, v: crate::Var) -> Option<&Tensor<T>> {
        self.inputs.get(&v.index())
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    /// Adds `other` into `self` (used to combine per-sample passes).
    pub fn accumulate(&mut self, other: Gradients<T>) {
        for (id, g) in other.params {
            match self.params.get_mut(&id) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    self.params.insert(id, g);
                }
            }
        }
        for (id, g) in other.inputs {
            match self.inputs.get_mut(&id) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    self.inputs.insert(id, g);
                }
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        for g in self.params.values_mut().chain(self.inputs.values_mut()) {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }

    /// Number of parameters whose gradient has at least one nonzero entry.
    pub fn nonzero_count(&self) -> usize {
        self.params.values().filter(|g| g.data().iter().any(|v| *v != T::zero())).count()
    }
}
