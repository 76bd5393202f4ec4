use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitKind {
    /// U(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
    UniformScaled,
    Zeros,
    Ones,
}

/// Seed-deterministic parameter initialization.
pub fn init_params<T: Real>(shape: &[usize], seed: u64, kind: InitKind) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = match kind {
        InitKind::Zeros => vec![T::zero(); n],
        InitKind::Ones => vec![T::one(); n],
        InitKind::UniformScaled => {
            let (fan_in, fan_out) = match shape.len() {
                0 => (1, 1),
                1 => (shape[0], shape[0]),
                _ => (shape[0], shape[shape.len() - 1]),
            };
            let a = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..n).map(|_| T::of(rng.random_range(-a..a))).collect()
        }
    };
    Tensor::new(shape.to_vec(), data).expect("shape product matches data length")
}

/// Named model parameters in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: BTreeMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Invalid(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(id)
    }

    /// Returns the existing parameter of that name, or registers a new one
    /// from `init`. Existing parameters must have the requested shape.
    pub fn get_or_add(&mut self, name: &str, shape: &[usize], init: impl FnOnce() -> Tensor<T>) -> Result<ParamId> {
        match self.id(name) {
            Some(id) => {
                let found = self.tensors[id.0].shape();
                if found != shape {
                    return Err(Error::Dimension(format!(
                        "parameter {name} has shape {found:?}, expected {shape:?}"
                    )));
                }
                Ok(id)
            }
            None => self.add(name, init()),
        }
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    /// Looks up a parameter by name and checks its shape.
    pub fn expect(&self, name: &str, shape: &[usize]) -> Result<ParamId> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::Dimension(format!("missing parameter {name}")))?;
        let found = self.tensors[id.0].shape();
        if found != shape {
            return Err(Error::Dimension(format!(
                "parameter {name} has shape {found:?}, expected {shape:?}"
            )));
        }
        Ok(id)
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

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
            index: self.index.clone(),
        }
    }
}

/// Gradients keyed by parameter. Parameters the loss never reached hold
/// no buffer and read as zero.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn empty(n_params: usize) -> Self {
        Gradients {
            grads: vec![None; n_params],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[T]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Dense gradient for `id`, zeros when unreached.
    pub fn dense(&self, id: ParamId, len: usize) -> Vec<T> {
        self.get(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![T::zero(); len])
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, g: &[T]) {
        if self.grads.len() <= id.0 {
            self.grads.resize(id.0 + 1, None);
        }
        match &mut self.grads[id.0] {
            Some(buf) => {
                for (b, x) in buf.iter_mut().zip(g) {
                    *b = *b + *x;
                }
            }
            slot @ None => *slot = Some(g.to_vec()),
        }
    }

    /// Adds `other` into `self`, parameter by parameter.
    pub fn add_assign(&mut self, other: &Gradients<T>) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, c: T) {
        for g in self.grads.iter_mut().flatten() {
            for x in g.iter_mut() {
                *x = *x * c;
            }
        }
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().flatten().all(|x| x.is_finite())
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .flatten()
            .map(|x| x.as_f64() * x.as_f64())
            .sum::<f64>()
            .sqrt()
    }
}
