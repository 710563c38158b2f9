//! Volumetric multi-task segmentation in pure Rust.
//!
//! One shared 3D residual encoder feeds `k` light upscore decoders, each
//! reproducing a different labeling protocol of the same volume. The crate
//! contains everything needed to run the pipeline end to end at desk scale:
//!
//! * [`tensor`] — dense tensors with tape-based reverse-mode differentiation
//!   and finite-difference gradient checking;
//! * [`graph`] — the encoder/decoder model, parameter init, checkpoints;
//! * [`train`] — cross-entropy losses, Adam, the queue-fed training loop;
//! * [`volume`] — volume containers, NIfTI-1 reading, normalization, crops,
//!   dataset manifests;
//! * [`phantom`] — deterministic synthetic multi-protocol phantoms that
//!   stand in for real acquisitions;
//! * [`eval`] — Dice evaluation reports and inference timing;
//! * [`selftest`] — the oracle suite wired into the CLI.

pub mod error;
pub mod eval;
pub mod graph;
pub mod phantom;
pub mod selftest;
pub mod tensor;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
