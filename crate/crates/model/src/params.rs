//! Named parameter groups and their binding into an autograd graph.

use std::collections::BTreeMap;

use hoi_autograd::{Gradients, Graph, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamShape {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

/// Ordered collection of named matrices. Order is insertion order and is
/// what the checkpoint blob layout follows.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
    index: BTreeMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    /// Like [`ParamSet::get`] but panics on a missing name; used where the
    /// architecture guarantees presence.
    pub fn tensor(&self, name: &str) -> &Tensor {
        self.get(name).unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
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

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn shapes(&self) -> Vec<ParamShape> {
        self.entries
            .iter()
            .map(|(n, t)| ParamShape {
                name: n.clone(),
                rows: t.rows(),
                cols: t.cols(),
            })
            .collect()
    }

    /// Rounds every value to the nearest `f32` so that in-memory parameters
    /// and their serialized form agree exactly.
    pub fn round_to_f32(&mut self) {
        for (_, t) in &mut self.entries {
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.is_finite())
    }

    /// Little-endian `f32` values, parameters in order, each row-major.
    pub fn to_le_f32(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.num_values() * 4);
        for (_, t) in &self.entries {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_le_f32(shapes: &[ParamShape], bytes: &[u8]) -> Result<Self> {
        let expected: usize = shapes.iter().map(|s| s.rows * s.cols * 4).sum();
        if bytes.len() != expected {
            return Err(ModelError::Shape(format!(
                "parameter payload has {} bytes, shapes need {expected}",
                bytes.len()
            )));
        }
        let mut set = ParamSet::new();
        let mut off = 0;
        for s in shapes {
            let n = s.rows * s.cols;
            let data = bytes[off..off + n * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            off += n * 4;
            if set.contains(&s.name) {
                return Err(ModelError::Shape(format!("duplicate parameter {}", s.name)));
            }
            set.insert(s.name.clone(), Tensor::from_vec(s.rows, s.cols, data));
        }
        Ok(set)
    }

    /// Places every parameter on `g`; `trainable` decides which receive
    /// gradients.
    pub fn bind<'a>(&'a self, g: &Graph, trainable: impl Fn(&str) -> bool) -> Bound<'a> {
        let vars = self.entries.iter().map(|(n, t)| g.leaf(t.clone(), trainable(n))).collect();
        Bound { set: self, vars }
    }
}

/// A [`ParamSet`] placed on a graph.
pub struct Bound<'a> {
    set: &'a ParamSet,
    vars: Vec<Var>,
}

impl Bound<'_> {
    pub fn var(&self, name: &str) -> Var {
        let i = *self
            .set
            .index
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"));
        self.vars[i]
    }

    pub fn has(&self, name: &str) -> bool {
        self.set.contains(name)
    }

    /// Gradients aligned with the set's order; `None` for parameters that
    /// were frozen or unused.
    pub fn gradients(&self, grads: &mut Gradients) -> Vec<Option<Tensor>> {
        self.vars.iter().map(|v| grads.take(*v)).collect()
    }
}

/// Seeded initializers.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(rng: ChaCha8Rng) -> Self {
        Self { rng }
    }

    /// Normal with the given std, resampled outside two standard deviations.
    pub fn trunc_normal(&mut self, rows: usize, cols: usize, std: f64) -> Tensor {
        let data = (0..rows * cols)
            .map(|_| loop {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                if z.abs() <= 2.0 {
                    break z * std;
                }
            })
            .collect();
        Tensor::from_vec(rows, cols, data)
    }

    pub fn uniform(&mut self, rows: usize, cols: usize, bound: f64) -> Tensor {
        let data = (0..rows * cols).map(|_| self.rng.random_range(-bound..=bound)).collect();
        Tensor::from_vec(rows, cols, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn blob_round_trip_is_exact_after_rounding() {
        let mut init = Init::new(ChaCha8Rng::seed_from_u64(3));
        let mut set = ParamSet::new();
        set.insert("a", init.trunc_normal(3, 4, 0.02));
        set.insert("b", init.uniform(1, 5, 1.0));
        set.round_to_f32();
        let bytes = set.to_le_f32();
        let back = ParamSet::from_le_f32(&set.shapes(), &bytes).unwrap();
        assert_eq!(back, set);
        assert_eq!(back.to_le_f32(), bytes);
    }

    #[test]
    fn truncated_normal_stays_in_range() {
        let mut init = Init::new(ChaCha8Rng::seed_from_u64(4));
        let t = init.trunc_normal(50, 50, 0.02);
        assert!(t.max_abs() <= 0.04);
    }

    #[test]
    fn payload_size_is_checked() {
        let shapes = vec![ParamShape {
            name: "w".into(),
            rows: 2,
            cols: 2,
        }];
        assert!(ParamSet::from_le_f32(&shapes, &[0u8; 12]).is_err());
    }
}
