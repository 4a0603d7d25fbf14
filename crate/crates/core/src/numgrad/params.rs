use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use super::array::Array;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub value: Array,
    pub trainable: bool,
}

/// Named parameters in lexicographic order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array) -> Result<()> {
        self.insert_entry(name.into(), value, true)
    }

    pub fn insert_frozen(&mut self, name: impl Into<String>, value: Array) -> Result<()> {
        self.insert_entry(name.into(), value, false)
    }

    fn insert_entry(&mut self, name: String, value: Array, trainable: bool) -> Result<()> {
        if self.entries.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name `{name}`")));
        }
        self.entries.insert(name, ParamEntry { value, trainable });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.entries.get(name).map(|e| &e.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array> {
        self.entries.get_mut(name).map(|e| &mut e.value)
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.get(name)
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        self.entries
            .get_mut(name)
            .map(|e| e.trainable = trainable)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamEntry)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar values across all entries.
    pub fn n_values(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&String, &Array)> {
        self.entries
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(k, e)| (k, &e.value))
    }

    pub(crate) fn entries_mut(&mut self) -> impl Iterator<Item = (&String, &mut ParamEntry)> {
        self.entries.iter_mut()
    }
}

/// Linear weight `[fan_in, fan_out]`, uniform in `±fan_in^(-1/2)`.
pub fn init_linear_weight<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Array {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound);
    let data = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
    Array::new(vec![fan_in, fan_out], data).expect("sized by construction")
}

pub fn init_standard_normal<R: Rng>(rng: &mut R, shape: &[usize]) -> Array {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Array::new(shape.to_vec(), data).expect("sized by construction")
}
