//! Named parameter storage. Name-sorted iteration keeps every consumer
//! (optimizer, checkpoints) deterministic.

use std::collections::BTreeMap;

use rand::Rng;

use crate::numerics::array::Array;

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    map: BTreeMap<String, Array>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array) {
        let name = name.into();
        let prev = self.map.insert(name.clone(), value);
        assert!(prev.is_none(), "duplicate parameter `{name}`");
    }

    /// Weight init: uniform scaled by 1/sqrt(fan_in).
    pub fn insert_weight<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) {
        let bound = 1.0 / (fan_in as f32).sqrt();
        self.insert(name, Array::rand_uniform(shape, bound, rng));
    }

    /// Bias init: zeros.
    pub fn insert_zeros(&mut self, name: impl Into<String>, shape: &[usize]) {
        self.insert(name, Array::zeros(shape));
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.map.get(name)
    }

    pub fn set(&mut self, name: &str, value: Array) {
        let slot = self
            .map
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"));
        assert_eq!(slot.shape(), value.shape(), "parameter shape changed");
        *slot = value;
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.map.values().map(Array::numel).sum()
    }
}
