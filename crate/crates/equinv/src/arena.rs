//! Flat storage for named tensors. Parameters and their gradients live in
//! two arenas with identical layout, addressed by `ParamId`, so optimizer
//! steps and serialization are plain index walks without mirror structs.

use crate::scalar::Real;
use ndarray::ArrayD;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub struct ParamArena<T> {
    entries: Vec<(String, ArrayD<T>)>,
}

impl<T: Real> ParamArena<T> {
    pub fn new() -> Self {
        ParamArena { entries: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: ArrayD<T>) -> ParamId {
        let name = name.into();
        assert!(
            self.entries.iter().all(|(n, _)| *n != name),
            "duplicate tensor name {name}"
        );
        self.entries.push((name, tensor));
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<T> {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<T> {
        &mut self.entries[id.0].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|(n, _)| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn total_elems(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        ParamArena {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), ArrayD::zeros(t.raw_dim())))
                .collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> ParamArena<U> {
        ParamArena {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), t.mapv(|v| U::from_f64(v.to_f64()))))
                .collect(),
        }
    }
}

impl<T: Real> Default for ParamArena<T> {
    fn default() -> Self {
        Self::new()
    }
}
