use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Named trainable tensors, kept in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(Error::InvalidConfig(format!("duplicate parameter {name}")));
        }
        self.names.push(name);
        let mut t = t.with_grad();
        t.grad = Some(vec![0.0; t.numel()]);
        self.tensors.push(t);
        Ok(ParamId(self.tensors.len() - 1))
    }

    /// Glorot-normal weight matrix of shape `[fan_in, fan_out]`.
    pub fn add_glorot(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Result<ParamId> {
        let sd = (2.0 / (fan_in + fan_out).max(1) as f64).sqrt();
        let dist = Normal::new(0.0, sd).expect("positive sd");
        let t = Tensor::from_fn(&[fan_in, fan_out], |_| dist.sample(rng));
        self.add(name, t)
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

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn n_values(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &[f64]) {
        let t = &mut self.tensors[id.0];
        match &mut t.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, x)| *a += x),
            None => t.grad = Some(g.to_vec()),
        }
    }

    pub fn zero_grad(&mut self) {
        for t in &mut self.tensors {
            t.grad = Some(vec![0.0; t.numel()]);
        }
    }

    /// Copies values from `other`, matching by name and shape.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<()> {
        for (name, t) in self.names.iter().zip(&mut self.tensors) {
            let src = other
                .id(name)
                .map(|id| other.get(id))
                .ok_or_else(|| Error::Format(format!("checkpoint lacks parameter {name}")))?;
            if src.shape() != t.shape() {
                return Err(Error::shape(t.shape(), src.shape()));
            }
            t.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.data().iter().all(|v| v.is_finite()))
    }
}
