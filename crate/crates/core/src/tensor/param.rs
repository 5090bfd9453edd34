use std::collections::HashMap;

use rand::Rng;

use super::{Gradients, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
}

/// Named, ordered collection of trainable tensors and their gradient buffers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidInput(format!("duplicate parameter `{name}`")));
        }
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            grad: None,
        });
        Ok(ParamId(id))
    }

    /// Adds a tensor drawn uniformly from ±√(1/fan_in).
    pub fn add_uniform<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        dims: Vec<usize>,
        fan_in: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        let bound = (1.0 / fan_in.max(1) as f64).sqrt();
        let n = dims.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        self.add(name, Tensor::from_vec(dims, data)?)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor> {
        self.params[id.0].grad.as_ref()
    }

    pub(crate) fn entries_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Sets every value to zero.
    pub fn zero_values(&mut self) {
        for p in &mut self.params {
            p.value.data_mut().fill(0.0);
        }
    }

    /// Adds `scale · ∂loss/∂param` from a backward pass into the gradient buffers.
    pub fn accumulate(&mut self, grads: &Gradients, scale: f64) -> Result<()> {
        for (i, p) in self.params.iter_mut().enumerate() {
            if let Some(g) = grads.param(ParamId(i)) {
                match &mut p.grad {
                    Some(acc) => acc.axpy(scale, g)?,
                    None => {
                        let mut fresh = g.clone();
                        if scale != 1.0 {
                            fresh.data_mut().iter_mut().for_each(|x| *x *= scale);
                        }
                        p.grad = Some(fresh);
                    }
                }
            }
        }
        Ok(())
    }

    /// Replaces values with those of `other`, matched by name and shape.
    pub fn copy_values_from(&mut self, other: &ParamSet) -> Result<()> {
        for p in &mut self.params {
            let src = other
                .id(&p.name)
                .ok_or_else(|| Error::UnknownParameter(p.name.clone()))?;
            let src = other.value(src);
            if src.shape() != p.value.shape() {
                return Err(Error::shape(
                    "copy_values_from",
                    format!("`{}`: {} vs {}", p.name, src.shape(), p.value.shape()),
                ));
            }
            p.value = src.clone();
        }
        Ok(())
    }
}
