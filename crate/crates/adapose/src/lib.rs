//! Domain-adaptive WiFi-CSI human pose regression, end to end: a small
//! reverse-mode tensor core, the pose regression network, the mapping
//! consistency objective with kernel MMD, PCK evaluation, a synthetic
//! two-domain CSI generator, and a deterministic SGDM trainer.

pub mod checkpoint;
pub mod cli;
pub mod diffcore;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod synthcsi;
pub mod trainer;

#[cfg(test)]
mod synthcsi_tests;

pub use diffcore::{DiffError, DiffTensor, Tape, TensorId};
