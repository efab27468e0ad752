//! Named parameter tables and initialization.

use std::collections::BTreeMap;

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::ops::NormStats;
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Trainable tensors plus norm running statistics, addressed by index or name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: BTreeMap<String, usize>,
    norm_names: Vec<String>,
    norms: Vec<NormStats>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> usize {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        let id = self.values.len();
        self.names.push(name.to_string());
        self.values.push(value);
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn add_norm(&mut self, name: &str, channels: usize) -> usize {
        self.norm_names.push(name.to_string());
        self.norms.push(NormStats::new(channels));
        self.norms.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn get(&self, id: usize) -> &Tensor {
        &self.values[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.values[id]
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id_of(name).map(|i| &self.values[i])
    }

    pub fn norm_names(&self) -> &[String] {
        &self.norm_names
    }

    pub fn norm(&self, id: usize) -> &NormStats {
        &self.norms[id]
    }

    pub fn norms(&self) -> &[NormStats] {
        &self.norms
    }

    pub fn set_norm(&mut self, id: usize, stats: NormStats) {
        assert_eq!(stats.mean.len(), self.norms[id].mean.len());
        self.norms[id] = stats;
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Registers every parameter as a differentiable leaf.
    pub fn bind(&self, tape: &Tape) -> Vec<Var> {
        self.values.iter().map(|v| tape.leaf(v.clone())).collect()
    }

    /// Registers every parameter as a constant (inference only).
    pub fn bind_frozen(&self, tape: &Tape) -> Vec<Var> {
        self.values.iter().map(|v| tape.constant(v.clone())).collect()
    }

    /// Replaces values from another store with identical names and shapes.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.names != self.names || other.norm_names != self.norm_names {
            return Err(Error::invalid("parameter tables have different layouts"));
        }
        for (i, (a, b)) in self.values.iter().zip(&other.values).enumerate() {
            if a.shape() != b.shape() {
                return Err(Error::dim(format!(
                    "parameter {} has shape {:?}, loaded {:?}",
                    self.names[i],
                    a.shape(),
                    b.shape()
                )));
            }
        }
        for (a, b) in self.norms.iter().zip(&other.norms) {
            if a.mean.len() != b.mean.len() {
                return Err(Error::dim("norm statistics have different widths"));
            }
        }
        self.values = other.values.clone();
        self.norms = other.norms.clone();
        Ok(())
    }

    pub(crate) fn from_parts(
        entries: Vec<(String, Tensor)>,
        norms: Vec<(String, NormStats)>,
    ) -> Self {
        let mut s = Self::new();
        for (n, t) in entries {
            s.add(&n, t);
        }
        for (n, st) in norms {
            s.norm_names.push(n);
            s.norms.push(st);
        }
        s
    }
}

/// He-scaled normal weights `N(0, 2/fan_in)` from the parameter's own stream.
pub fn he_normal(shape: &[usize], fan_in: usize, seed: u64, name: &str) -> Tensor {
    let mut r = rng::stream(seed, &format!("init:{name}"));
    let std = (2.0 / fan_in as f64).sqrt();
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        let z: f64 = StandardNormal.sample(&mut r);
        *v = z * std;
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_depends_only_on_name_and_seed() {
        let a = he_normal(&[4, 4], 4, 9, "a.weight");
        let b = he_normal(&[4, 4], 4, 9, "a.weight");
        let c = he_normal(&[4, 4], 4, 9, "b.weight");
        assert!(a.bitwise_eq(&b));
        assert!(!a.bitwise_eq(&c));
    }

    #[test]
    fn load_requires_same_layout() {
        let mut a = ParamStore::new();
        a.add("w", Tensor::zeros(&[2]));
        let mut b = ParamStore::new();
        b.add("w", Tensor::ones(&[2]));
        a.load_from(&b).unwrap();
        assert_eq!(a.get(0).data(), &[1.0, 1.0]);
        let mut c = ParamStore::new();
        c.add("w", Tensor::ones(&[3]));
        assert!(a.load_from(&c).is_err());
    }
}
