//! Named learnable-tensor storage with deterministic initialization.
//!
//! Parameters are registered in construction order; initialization draws
//! from a single SplitMix64 stream in that order, so a (config, seed) pair
//! always produces bitwise-identical parameters.

use std::collections::HashMap;

use crate::error::{Result, SfimError};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Handle to one parameter in a `ParamStore`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PId(pub(crate) usize);

/// Initialization scheme for a parameter.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Uniform(-b, b) with b = sqrt(6 / fan_in).
    HeUniform { fan_in: usize },
    Zeros,
    Ones,
}

struct Entry {
    name: String,
    value: Tensor,
    grad: Vec<f64>,
}

/// Ordered collection of named parameters plus their gradient accumulators.
pub struct ParamStore {
    entries: Vec<Entry>,
    by_name: HashMap<String, usize>,
    rng: Rng,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            entries: Vec::new(),
            by_name: HashMap::new(),
            rng: Rng::new(seed),
        }
    }

    /// Register a parameter. Names must be unique; they key checkpoints.
    pub fn alloc(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> PId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let numel: usize = shape.iter().product();
        let data = match init {
            Init::HeUniform { fan_in } => {
                let bound = (6.0 / fan_in as f64).sqrt();
                (0..numel).map(|_| self.rng.uniform(-bound, bound)).collect()
            }
            Init::Zeros => vec![0.0; numel],
            Init::Ones => vec![1.0; numel],
        };
        let id = PId(self.entries.len());
        self.by_name.insert(name.clone(), id.0);
        self.entries.push(Entry {
            name,
            value: Tensor::new(shape.to_vec(), data).expect("init data matches shape"),
            grad: vec![0.0; numel],
        });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    pub fn name(&self, id: PId) -> &str {
        &self.entries[id.0].name
    }

    pub fn id_of(&self, name: &str) -> Option<PId> {
        self.by_name.get(name).map(|&i| PId(i))
    }

    pub fn value(&self, id: PId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: PId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: PId) -> &[f64] {
        &self.entries[id.0].grad
    }

    pub fn accumulate_grad(&mut self, id: PId, grad: &[f64]) {
        let dst = &mut self.entries[id.0].grad;
        debug_assert_eq!(dst.len(), grad.len());
        for (d, g) in dst.iter_mut().zip(grad) {
            *d += g;
        }
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(0.0);
        }
    }

    /// Scale all gradients so their global L2 norm is at most `max_norm`.
    /// Returns the pre-clip norm.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let sq: f64 = self
            .entries
            .iter()
            .map(|e| e.grad.iter().map(|g| g * g).sum::<f64>())
            .sum();
        let norm = sq.sqrt();
        if norm > max_norm && norm > 0.0 {
            let scale = max_norm / norm;
            for e in &mut self.entries {
                e.grad.iter_mut().for_each(|g| *g *= scale);
            }
        }
        norm
    }

    pub fn ids(&self) -> impl Iterator<Item = PId> {
        (0..self.entries.len()).map(PId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (PId, &str, &Tensor)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (PId(i), e.name.as_str(), &e.value))
    }

    /// Replace a parameter's value (checkpoint load). Shape must match.
    pub fn set_value(&mut self, id: PId, value: Tensor) -> Result<()> {
        let cur = &self.entries[id.0].value;
        if cur.shape() != value.shape() {
            return Err(SfimError::shape(format!(
                "parameter {} has shape {:?}, checkpoint value has {:?}",
                self.entries[id.0].name,
                cur.shape(),
                value.shape()
            )));
        }
        self.entries[id.0].value = value;
        Ok(())
    }

    /// Adds uniform noise to every parameter so identity-at-initialization
    /// paths carry signal during finite-difference checks.
    pub fn perturb_all(&mut self, scale: f64, seed: u64) {
        let mut rng = crate::rng::Rng::new(seed);
        for e in &mut self.entries {
            for v in e.value.data_mut() {
                *v += scale * (rng.next_f64() * 2.0 - 1.0);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_gives_bitwise_identical_values() {
        let build = |seed| {
            let mut s = ParamStore::new(seed);
            s.alloc("a", &[4, 3, 3, 3], Init::HeUniform { fan_in: 27 });
            s.alloc("b", &[7], Init::HeUniform { fan_in: 7 });
            s
        };
        let s1 = build(99);
        let s2 = build(99);
        for (id, _, v1) in s1.iter() {
            let v2 = s2.value(id);
            for (a, b) in v1.data().iter().zip(v2.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        let s3 = build(100);
        assert_ne!(s1.value(PId(0)).data()[0], s3.value(PId(0)).data()[0]);
    }

    #[test]
    fn he_uniform_respects_bound() {
        let mut s = ParamStore::new(1);
        let id = s.alloc("w", &[1000], Init::HeUniform { fan_in: 54 });
        let bound = (6.0 / 54.0f64).sqrt();
        for &v in s.value(id).data() {
            assert!(v.abs() <= bound);
        }
    }

    #[test]
    fn grad_accumulation_and_clipping() {
        let mut s = ParamStore::new(1);
        let id = s.alloc("w", &[3], Init::Zeros);
        s.accumulate_grad(id, &[3.0, 0.0, 4.0]);
        s.accumulate_grad(id, &[0.0, 0.0, 0.0]);
        assert_eq!(s.grad(id), &[3.0, 0.0, 4.0]);
        let norm = s.clip_grad_norm(1.0);
        assert!((norm - 5.0).abs() < 1e-12);
        let clipped: f64 = s.grad(id).iter().map(|g| g * g).sum::<f64>();
        assert!((clipped.sqrt() - 1.0).abs() < 1e-12);
        s.zero_grads();
        assert_eq!(s.grad(id), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn count_and_lookup() {
        let mut s = ParamStore::new(1);
        s.alloc("conv.w", &[2, 3, 3, 3], Init::Zeros);
        s.alloc("conv.b", &[2], Init::Zeros);
        assert_eq!(s.param_count(), 54 + 2);
        assert_eq!(s.id_of("conv.b"), Some(PId(1)));
        assert_eq!(s.name(PId(0)), "conv.w");
    }
}
