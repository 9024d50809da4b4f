use std::collections::HashMap;

use rand::Rng;

use super::Tensor;
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
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub grad: Option<Tensor>,
}

/// Named, ordered collection of trainable tensors. Registration order is the
/// checkpoint order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            tensor,
            grad: None,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar weights.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Overwrites values from `(name, tensor)` pairs, which must cover every
    /// parameter exactly once with matching shapes.
    pub fn load(&mut self, entries: Vec<(String, Tensor)>) -> Result<()> {
        let mut seen = vec![false; self.params.len()];
        let mut unexpected = Vec::new();
        let mut staged = Vec::new();
        for (name, tensor) in entries {
            match self.by_name.get(&name) {
                Some(&id) => {
                    tensor.expect_shape("load", self.params[id.0].tensor.shape())?;
                    seen[id.0] = true;
                    staged.push((id, tensor));
                }
                None => unexpected.push(name),
            }
        }
        let missing: Vec<String> = self
            .params
            .iter()
            .zip(&seen)
            .filter(|(_, &s)| !s)
            .map(|(p, _)| p.name.clone())
            .collect();
        if !missing.is_empty() || !unexpected.is_empty() {
            return Err(Error::CheckpointMismatch { missing, unexpected });
        }
        for (id, t) in staged {
            self.params[id.0].tensor = t;
        }
        Ok(())
    }
}

/// Registers parameters under a dotted name prefix.
pub struct ParamBuilder<'a, R: Rng> {
    store: &'a mut ParamStore,
    rng: &'a mut R,
    prefix: String,
}

impl<'a, R: Rng> ParamBuilder<'a, R> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut R) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    /// A builder whose names are prefixed with `name.`.
    pub fn sub(&mut self, name: impl std::fmt::Display) -> ParamBuilder<'_, R> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    /// Uniform in `±1/sqrt(fan_in)`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<ParamId> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let t = Tensor::from_fn(shape, |_| self.rng.random_range(-bound..bound));
        self.store.add(self.full_name(name), t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        self.store.add(self.full_name(name), Tensor::full(shape, value))
    }
}
