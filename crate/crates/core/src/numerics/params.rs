use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;

/// Named tensors in a stable (lexicographic) order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_map(tensors: BTreeMap<String, Tensor>) -> Self {
        Self { tensors }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    /// `self += factor · other` for every tensor present in both.
    pub fn add_scaled(&mut self, other: &ParamSet, factor: f64) {
        for (name, t) in self.tensors.iter_mut() {
            if let Some(o) = other.get(name) {
                for (a, b) in t.values_mut().iter_mut().zip(o.values()) {
                    *a += factor * b;
                }
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors.values().fold(0.0, |m, t| m.max(t.max_abs()))
    }
}

impl FromIterator<(String, Tensor)> for ParamSet {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        Self {
            tensors: iter.into_iter().collect(),
        }
    }
}
