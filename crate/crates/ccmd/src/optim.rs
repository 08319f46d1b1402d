//! Adam optimizer over a named parameter store.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::params::{ParamStore, ParamVars};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global-norm gradient clipping; off unless set.
    pub clip: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip: None,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.clip.map_or(true, |c| c > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid Adam settings: {self:?}")))
        }
    }
}

/// First/second moment state, one slot per parameter tensor in
/// registration order.
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Result<Adam> {
        cfg.validate()?;
        let m = store
            .entries()
            .iter()
            .map(|e| vec![0.0; e.values.len()])
            .collect::<Vec<_>>();
        let v = m.clone();
        Ok(Adam { cfg, m, v, t: 0 })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    /// One update from the gradients retained on `tape` after a backward
    /// pass. Every parameter must have received a gradient; a missing one
    /// means the graph was wired wrong, not that the step should silently
    /// skip it.
    pub fn step(&mut self, store: &mut ParamStore, tape: &Tape, leaves: &ParamVars) -> Result<()> {
        let mut grads = Vec::with_capacity(self.m.len());
        for entry in store.entries() {
            let var = leaves.get(&entry.name)?;
            let g = tape.grad(var).ok_or_else(|| {
                Error::Config(format!("parameter {} received no gradient", entry.name))
            })?;
            grads.push(g);
        }
        let scale = match self.cfg.clip {
            Some(max_norm) => {
                let total: f64 = grads
                    .iter()
                    .flat_map(|g| g.iter())
                    .map(|x| x * x)
                    .sum::<f64>()
                    .sqrt();
                if total > max_norm {
                    max_norm / total
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        for (idx, entry) in store.entries_mut().iter_mut().enumerate() {
            let (m, v) = (&mut self.m[idx], &mut self.v[idx]);
            for (i, value) in entry.values.iter_mut().enumerate() {
                let g = grads[idx][i] * scale;
                m[i] = self.cfg.beta1 * m[i] + (1.0 - self.cfg.beta1) * g;
                v[i] = self.cfg.beta2 * v[i] + (1.0 - self.cfg.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *value -= self.cfg.lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
            }
        }
        Ok(())
    }
}
