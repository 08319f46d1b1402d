//! Versioned JSON checkpoints: architecture, parameters, and the label
//! standardization constants of the training set.
//!
//! Serialization must round-trip every f64 bit-exactly (enforced by test);
//! evaluation after load must equal evaluation before save.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{init_params, BackboneConfig};
use crate::error::{Error, Result};
use crate::params::{ParamEntry, ParamStore};

pub const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointFile {
    ccmd_ckpt_version: u32,
    backbone: BackboneConfig,
    seed: u64,
    label_mean: f64,
    label_std: f64,
    params: Vec<ParamEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub backbone: BackboneConfig,
    /// Seed that initialized (and shuffled) the producing run.
    pub seed: u64,
    /// Standardization constants of the labels the model was trained on.
    pub label_mean: f64,
    pub label_std: f64,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = CheckpointFile {
            ccmd_ckpt_version: CKPT_VERSION,
            backbone: self.backbone.clone(),
            seed: self.seed,
            label_mean: self.label_mean,
            label_std: self.label_std,
            params: self.params.entries().to_vec(),
        };
        let body = serde_json::to_string(&file).expect("checkpoint serialize");
        std::fs::write(path, body).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        let path = path.as_ref();
        let body =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let file: CheckpointFile = serde_json::from_str(&body).map_err(|e| Error::Malformed {
            path: path.display().to_string(),
            line: 1,
            msg: e.to_string(),
        })?;
        if file.ccmd_ckpt_version != CKPT_VERSION {
            return Err(Error::Config(format!(
                "checkpoint version {} unsupported (expected {CKPT_VERSION})",
                file.ccmd_ckpt_version
            )));
        }
        file.backbone.validate()?;
        if !(file.label_std > 0.0) || !file.label_mean.is_finite() {
            return Err(Error::Config(
                "checkpoint carries invalid standardization constants".into(),
            ));
        }
        let mut params = ParamStore::new();
        for e in &file.params {
            if crate::autodiff::numel(&e.shape) != e.values.len() {
                return Err(Error::Config(format!(
                    "checkpoint parameter {} has {} values for shape {:?}",
                    e.name,
                    e.values.len(),
                    e.shape
                )));
            }
            if params.contains(&e.name) {
                return Err(Error::Config(format!(
                    "checkpoint parameter {} appears twice",
                    e.name
                )));
            }
            params.add(e.name.clone(), &e.shape, e.values.clone());
        }
        let ckpt = Checkpoint {
            backbone: file.backbone,
            seed: file.seed,
            label_mean: file.label_mean,
            label_std: file.label_std,
            params,
        };
        ckpt.check_params_match_arch()?;
        Ok(ckpt)
    }

    /// The parameter list must be exactly what the declared architecture
    /// would allocate — same names, same shapes, same order.
    pub fn check_params_match_arch(&self) -> Result<()> {
        let reference = init_params(&self.backbone, 0)?;
        let ok = reference.len() == self.params.len()
            && reference
                .entries()
                .iter()
                .zip(self.params.entries())
                .all(|(a, b)| a.name == b.name && a.shape == b.shape);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(
                "checkpoint parameters do not match the declared architecture".into(),
            ))
        }
    }
}
