//! Named parameter collections: the universal representation of a model.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::tensor::{Tensor, TensorError};

/// Ordered (lexicographic by name) collection of named tensors with
/// optional string metadata (stage tag, seed, parent checkpoint hash).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParameterMap {
    tensors: BTreeMap<String, Tensor>,
    metadata: BTreeMap<String, String>,
}

impl ParameterMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.metadata.insert(key.into(), value.into());
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.get(key).map(|s| s.as_str())
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn clear_metadata(&mut self) {
        self.metadata.clear();
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(|t| t.numel()).sum()
    }

    /// Entry-wise combination of two maps with identical names and shapes.
    pub fn zip_with(
        &self,
        other: &ParameterMap,
        f: impl Fn(&Tensor, &Tensor) -> Result<Tensor, TensorError>,
    ) -> Result<ParameterMap, TensorError> {
        let mut out = ParameterMap::new();
        for (name, t) in self.iter() {
            let o = other.get(name).ok_or_else(|| TensorError::ShapeMismatch {
                op: "zip_with",
                left: t.shape().to_vec(),
                right: vec![],
            })?;
            out.insert(name, f(t, o)?);
        }
        Ok(out)
    }

    /// Entry-wise p + q.
    pub fn add(&self, other: &ParameterMap) -> Result<ParameterMap, TensorError> {
        self.zip_with(other, |a, b| a.add(b))
    }

    /// Entry-wise p - q.
    pub fn sub(&self, other: &ParameterMap) -> Result<ParameterMap, TensorError> {
        self.zip_with(other, |a, b| a.sub(b))
    }

    pub fn scale(&self, c: f32) -> ParameterMap {
        let mut out = ParameterMap::new();
        for (name, t) in self.iter() {
            out.insert(name, t.scale(c));
        }
        out
    }

    /// Flat L2 norm over every tensor, f64 accumulation in name order.
    pub fn l2_norm(&self) -> f64 {
        let mut acc = 0.0f64;
        for (_, t) in self.iter() {
            for &v in t.data() {
                acc += (v as f64) * (v as f64);
            }
        }
        acc.sqrt()
    }
}

impl FromIterator<(String, Tensor)> for ParameterMap {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        let mut map = ParameterMap::new();
        for (k, v) in iter {
            map.insert(k, v);
        }
        map
    }
}
