//! Named learnable parameters and their accumulated gradients.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered parameter registry. Registration order is the checkpoint order.
///
/// Gradients accumulate across [`ParamStore::accumulate`] calls until
/// [`ParamStore::zero_grad`].
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    grads: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.grads.push(Tensor::zeros(value.shape()));
        self.values.push(value);
        Ok(ParamId(id))
    }

    /// Kaiming-uniform (fan-in, `a = sqrt(5)`) conv kernel `[C_out, C_in, k, k]`:
    /// bound `1 / sqrt(C_in * k * k)`.
    pub fn conv_kernel<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        cout: usize,
        cin: usize,
        k: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        let bound = 1.0 / ((cin * k * k) as f64).sqrt();
        self.add(name, Tensor::uniform(&[cout, cin, k, k], -bound, bound, rng))
    }

    /// Transposed-conv kernel `[C_in, C_out, k, k]`; fan-in taken as `C_out * k * k`.
    pub fn tconv_kernel<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        cin: usize,
        cout: usize,
        k: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        let bound = 1.0 / ((cout * k * k) as f64).sqrt();
        self.add(name, Tensor::uniform(&[cin, cout, k, k], -bound, bound, rng))
    }

    pub fn zeros(&mut self, name: impl Into<String>, len: usize) -> Result<ParamId> {
        self.add(name, Tensor::zeros(&[len]))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    /// Replaces a parameter value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        self.values[id.0].same_shape(&value)?;
        self.values[id.0] = value;
        Ok(())
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.grads[id.0]
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn accumulate_grad(&mut self, id: ParamId, g: &Tensor<T>) -> Result<()> {
        self.grads[id.0].add_assign(g)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.values
            .iter()
            .enumerate()
            .map(move |(i, v)| (ParamId(i), self.names[i].as_str(), v))
    }

    /// Same parameters converted to another precision (gradients reset).
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            grads: self.values.iter().map(|v| Tensor::zeros(v.shape())).collect(),
            index: self.index.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.zeros("a", 3).unwrap();
        assert!(s.zeros("a", 3).is_err());
    }

    #[test]
    fn kaiming_bound_respected() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::<f64>::new();
        let id = s.conv_kernel("w", 8, 4, 3, &mut rng).unwrap();
        let bound = 1.0 / 6.0;
        assert!(s.get(id).max_abs() <= bound);
        assert!(s.get(id).max_abs() > 0.5 * bound);
    }
}
