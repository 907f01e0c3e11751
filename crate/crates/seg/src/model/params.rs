use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use revhrnet_core::{Scalar, Tensor};

/// Learnable weight or running statistic.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    /// Batch-norm running mean/variance: persisted but never differentiated.
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub frozen: bool,
    pub kind: ParamKind,
}

impl<T: Scalar> Parameter<T> {
    /// Receives gradients and optimizer updates.
    pub fn trainable(&self) -> bool {
        !self.frozen && self.kind == ParamKind::Weight
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Ordered, uniquely named parameter table of one model component.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    rng: ChaCha8Rng,
    frozen_default: bool,
}

impl<T: Scalar> ParamStore<T> {
    pub(crate) fn new(seed: u64, frozen_default: bool) -> Self {
        Self {
            params: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            frozen_default,
        }
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> std::slice::IterMut<'_, Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn element_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.params.iter_mut().for_each(|p| p.frozen = frozen);
    }

    fn push(&mut self, name: String, value: Tensor<T>, kind: ParamKind) -> ParamId {
        debug_assert!(self.params.iter().all(|p| p.name != name), "duplicate {name}");
        self.params.push(Parameter {
            name,
            value,
            frozen: self.frozen_default,
            kind,
        });
        ParamId(self.params.len() - 1)
    }

    /// He-normal weights, `std = sqrt(2 / fan_in)`.
    pub(crate) fn he_weight(&mut self, name: String, shape: [usize; 4]) -> ParamId {
        let fan_in = shape[1] * shape[2] * shape[3];
        let normal = Normal::new(0.0f64, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        let rng = &mut self.rng;
        let value = Tensor::from_fn(&shape, |_| T::lit(normal.sample(rng))).expect("positive dims");
        self.push(name, value, ParamKind::Weight)
    }

    pub(crate) fn constant(&mut self, name: String, len: usize, v: f64, kind: ParamKind) -> ParamId {
        let value = Tensor::full(&[len], T::lit(v)).expect("positive length");
        self.push(name, value, kind)
    }
}
