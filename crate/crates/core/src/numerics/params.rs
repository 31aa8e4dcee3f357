use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Named parameters with gradients of identical shape.
///
/// Names are kept sorted so iteration order (and hence checkpoint layout) is stable.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    grads: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter `{name}`")));
        }
        self.grads.insert(name.clone(), Tensor::zeros(value.shape()));
        self.params.insert(name, value);
        Ok(())
    }

    /// Inserts or replaces a parameter, resetting its gradient.
    pub fn set(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        self.grads.insert(name.clone(), Tensor::zeros(value.shape()));
        self.params.insert(name, value);
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.grads.remove(name);
        self.params.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor> {
        self.grads
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))
    }

    pub fn grad_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.grads
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn grads(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn zero_grads(&mut self) {
        for g in self.grads.values_mut() {
            g.data_mut().fill(0.0);
        }
    }

    pub(crate) fn accumulate_grad(&mut self, name: &str, grad: &Tensor) -> Result<()> {
        let slot = self.grad_mut(name)?;
        if slot.len() != grad.len() {
            return Err(Error::shape(format!(
                "gradient for `{name}` has {} values, parameter has {}",
                grad.len(),
                slot.len()
            )));
        }
        slot.add_assign(grad);
        Ok(())
    }

    pub fn grad_norm(&self) -> f64 {
        self.grads.values().map(Tensor::squared_norm).sum::<f64>().sqrt()
    }

    /// Rescales all gradients so their global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm.is_finite() {
            let scale = (max_norm / norm) as f32;
            for g in self.grads.values_mut() {
                for v in g.data_mut() {
                    *v *= scale;
                }
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::zeros(&[2])).unwrap();
        assert!(store.insert("w", Tensor::zeros(&[2])).is_err());
        assert_eq!(store.grad("w").unwrap().shape(), &[2]);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::zeros(&[2])).unwrap();
        store.grad_mut("a").unwrap().data_mut().copy_from_slice(&[3.0, 4.0]);
        let before = store.clip_grad_norm(1.0);
        assert!((before - 5.0).abs() < 1e-12);
        assert!((store.grad_norm() - 1.0).abs() < 1e-6);
    }
}
