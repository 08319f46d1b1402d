//! Ordered, named parameter storage shared by the encoder and backbones.
//!
//! Parameters live outside any tape; each forward pass registers them as
//! differentiable leaves on a fresh tape. The fixed registration order keeps
//! the optimizer state, checkpoints, and gradient collection aligned.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{numel, Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], values: Vec<f64>) {
        let name = name.into();
        debug_assert_eq!(numel(shape), values.len(), "{name}");
        debug_assert!(!self.index.contains_key(&name), "duplicate param {name}");
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry {
            name,
            shape: shape.to_vec(),
            values,
        });
    }

    pub fn get(&self, name: &str) -> Result<&ParamEntry> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i])
            .ok_or_else(|| Error::Config(format!("unknown parameter '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ParamEntry> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.entries[i]),
            None => Err(Error::Config(format!("unknown parameter '{name}'"))),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|e| e.values.len()).sum()
    }

    /// Register every parameter as a differentiable leaf on `tape`.
    pub fn leaves(&self, tape: &Tape) -> Result<ParamVars> {
        let mut vars = Vec::with_capacity(self.entries.len());
        let mut index = HashMap::with_capacity(self.entries.len());
        for (i, e) in self.entries.iter().enumerate() {
            vars.push(tape.input(&e.values, &e.shape)?);
            index.insert(e.name.clone(), i);
        }
        Ok(ParamVars { vars, index })
    }

    /// Elementwise perturbation with Gaussian noise (used to fabricate a
    /// teacher from a student init without training).
    pub fn perturbed(&self, sigma: f64, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = self.clone();
        for e in &mut out.entries {
            for v in &mut e.values {
                *v += sigma * gaussian(&mut rng);
            }
        }
        out
    }
}

/// Tape-bound views of every parameter for one forward pass.
pub struct ParamVars {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::Config(format!("unknown parameter '{name}'")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.index.iter().map(move |(n, &i)| (n.as_str(), self.vars[i]))
    }
}

/// Box-Muller standard normal.
pub fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let u1: f64 = rng.gen::<f64>();
        let u2: f64 = rng.gen::<f64>();
        if u1 > f64::MIN_POSITIVE {
            return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
    }
}

/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` weight initialization.
pub fn uniform_fan_in(rng: &mut ChaCha8Rng, fan_in: usize, n: usize) -> Vec<f64> {
    let a = 1.0 / (fan_in as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-a..a)).collect()
}

/// `N(0, 0.02)` embedding initialization.
pub fn normal_embed(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| 0.02 * gaussian(rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaves_follow_registration_order_and_receive_grads() {
        let mut store = ParamStore::new();
        store.add("a", &[2], vec![1.0, 2.0]);
        store.add("b", &[2], vec![3.0, 4.0]);
        let tape = Tape::new();
        let vars = store.leaves(&tape).unwrap();
        let (a, b) = (vars.get("a").unwrap(), vars.get("b").unwrap());
        let y = tape.sum_all(tape.mul(a, b).unwrap()).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(a).unwrap(), vec![3.0, 4.0]);
        assert_eq!(tape.grad(b).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn perturbation_is_deterministic_and_nonzero() {
        let mut store = ParamStore::new();
        store.add("w", &[4], vec![0.0; 4]);
        let p1 = store.perturbed(0.1, 9);
        let p2 = store.perturbed(0.1, 9);
        assert_eq!(p1, p2);
        assert!(p1.get("w").unwrap().values.iter().any(|&v| v != 0.0));
        assert_ne!(p1, store.perturbed(0.1, 10));
    }

    #[test]
    fn unknown_parameter_is_an_error() {
        let store = ParamStore::new();
        assert!(store.get("nope").is_err());
    }
}
