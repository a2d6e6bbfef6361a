//! Named-tensor map: the unit of checkpointing, scattering, and aggregation.

use std::collections::HashMap;

use crate::error::{Result, TwistError};
use crate::tensor::Tensor;

/// Ordered mapping from parameter name to tensor. Iteration order is
/// insertion order and is part of the determinism contract (optimizer steps,
/// checkpoint layout, and aggregation all walk it).
#[derive(Clone, Debug, Default)]
pub struct ParameterStore {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(TwistError::InvalidInput(format!(
                "duplicate parameter name {name:?}"
            )));
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).copied().map(|i| &mut self.entries[i].1)
    }

    pub fn expect(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| TwistError::InvalidInput(format!("missing parameter {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    /// Total scalar parameter count.
    pub fn total_params(&self) -> u64 {
        self.entries.iter().map(|(_, t)| t.numel() as u64).sum()
    }

    /// Bytes the store occupies as 32-bit floats.
    pub fn param_bytes(&self) -> u64 {
        4 * self.total_params()
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in self.entries.iter_mut() {
            t.zero_grad();
        }
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.is_finite())
    }

    pub fn bitwise_eq(&self, other: &ParameterStore) -> bool {
        self.len() == other.len()
            && self
                .iter()
                .zip(other.iter())
                .all(|((na, ta), (nb, tb))| na == nb && ta.bitwise_eq(tb))
    }

    pub fn max_abs_diff(&self, other: &ParameterStore) -> f32 {
        self.iter()
            .zip(other.iter())
            .map(|((_, a), (_, b))| a.max_abs_diff(b))
            .fold(0.0, f32::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_duplicate_names() {
        let mut s = ParameterStore::new();
        s.insert("w", Tensor::zeros(&[2])).unwrap();
        assert!(s.insert("w", Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn iteration_order_is_insertion_order() {
        let mut s = ParameterStore::new();
        for name in ["c", "a", "b"] {
            s.insert(name, Tensor::zeros(&[1])).unwrap();
        }
        let names: Vec<&str> = s.names().collect();
        assert_eq!(names, vec!["c", "a", "b"]);
    }
}
