//! Named parameter sets.
//!
//! A [`ParamSet`] is an ordered map name -> (shape, values). Order is the
//! insertion order of construction, which is deterministic, so checkpoints,
//! optimizer state, and gradient reports all line up by index.

use super::{Tape, TensorId};
use crate::rng;
use std::collections::HashMap;

#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    values: Vec<Vec<f64>>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a tensor; names must be unique.
    pub fn insert(&mut self, name: &str, shape: &[usize], values: Vec<f64>) {
        assert_eq!(
            values.len(),
            shape.iter().product::<usize>(),
            "param {name}: data/shape mismatch"
        );
        assert!(!self.index.contains_key(name), "duplicate param name {name}");
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.shapes.push(shape.to_vec());
        self.values.push(values);
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn shape(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    pub fn values(&self, i: usize) -> &[f64] {
        &self.values[i]
    }

    pub fn values_mut(&mut self, i: usize) -> &mut Vec<f64> {
        &mut self.values[i]
    }

    pub fn by_name(&self, name: &str) -> &[f64] {
        let i = self.position(name).unwrap_or_else(|| panic!("unknown param {name}"));
        &self.values[i]
    }

    pub fn by_name_mut(&mut self, name: &str) -> &mut Vec<f64> {
        let i = self.position(name).unwrap_or_else(|| panic!("unknown param {name}"));
        &mut self.values[i]
    }

    pub fn shape_by_name(&self, name: &str) -> &[usize] {
        let i = self.position(name).unwrap_or_else(|| panic!("unknown param {name}"));
        &self.shapes[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[usize], &[f64])> {
        (0..self.len()).map(move |i| (self.names[i].as_str(), &self.shapes[i][..], &self.values[i][..]))
    }

    pub fn total_elements(&self) -> usize {
        self.values.iter().map(Vec::len).sum()
    }

    /// Bind every parameter as a gradient-bearing leaf on `tape`.
    pub fn bind(&self, tape: &Tape) -> Bound {
        let ids: Vec<TensorId> =
            (0..self.len()).map(|i| tape.leaf(&self.shapes[i], self.values[i].clone())).collect();
        Bound { ids, index: self.index.clone() }
    }

    /// Bind every parameter as a constant (no gradients) on `tape`.
    pub fn bind_frozen(&self, tape: &Tape) -> Bound {
        let ids: Vec<TensorId> =
            (0..self.len()).map(|i| tape.constant(&self.shapes[i], self.values[i].clone())).collect();
        Bound { ids, index: self.index.clone() }
    }
}

/// Tape-resident handles for a bound [`ParamSet`], addressed by name or index.
pub struct Bound {
    ids: Vec<TensorId>,
    index: HashMap<String, usize>,
}

impl Bound {
    pub fn get(&self, name: &str) -> TensorId {
        let i = *self.index.get(name).unwrap_or_else(|| panic!("unknown param {name}"));
        self.ids[i]
    }

    pub fn id_at(&self, i: usize) -> TensorId {
        self.ids[i]
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Gaussian init with the stream derived from `(seed, name)`, so adding or
/// reordering unrelated parameters never changes this tensor's values.
pub fn init_normal(seed: u64, name: &str, shape: &[usize], std: f64) -> Vec<f64> {
    let mut r = rng::stream(seed, &format!("init/{name}"));
    (0..shape.iter().product::<usize>()).map(|_| rng::normal(&mut r) * std).collect()
}

/// Constant-filled init.
pub fn init_value(shape: &[usize], value: f64) -> Vec<f64> {
    vec![value; shape.iter().product::<usize>()]
}
