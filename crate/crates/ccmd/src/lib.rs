//! Coordinated cross-modal distillation for molecular property prediction,
//! desk scale: a reverse-mode autodiff engine, synthetic molecule data,
//! graph-transformer and GIN backbones with per-layer traces, the
//! distillation loss algebra with a size-dependent coordinating weight, a
//! gradient-magnitude scaling harness, and a training/evaluation CLI.

pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod distill;
pub mod encoder;
pub mod error;
pub mod experiments;
pub mod gradscan;
pub mod moldata;
pub mod optim;
pub mod params;
pub mod trainer;

pub use error::{Error, Result};
