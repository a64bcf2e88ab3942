//! Desk-scale laboratory for distilling multi-step flow-matching models into
//! few-step and one-step students.
//!
//! The crate is `no_std` (alloc only): everything here is pure computation.
//! File formats, checkpoints and the CLI live in the companion `flowlab-cli`
//! crate.
//!
//! Layering, bottom up:
//!
//! * [`tensor`] — dense row-major `f64` matrices with strict finiteness checks
//! * [`graph`] — dynamic-tape reverse-mode differentiation over tensors
//! * [`params`] — named trainable parameters, Adam, and a finite-difference
//!   gradient oracle
//! * [`datasets`] — seeded synthetic conditional datasets and batch iteration
//! * [`model`] — the velocity field with interchangeable conditioning
//!   pathways (adaLN-style, step tokens, none) and exact parameter accounting
//! * [`flow`] — interpolation path, schedules, guided Euler solver, teacher
//!   training
//! * [`distill`] — mean-velocity targets, dual supervision, weak-guidance
//!   regularization, the student training loop, and the progressive baseline
//! * [`metrics`] — sliced Wasserstein, KS statistics, histograms

#![no_std]

extern crate alloc;

#[cfg(any(test, feature = "std"))]
extern crate std;

pub mod datasets;
pub mod distill;
pub mod error;
pub mod flow;
pub mod graph;
pub mod math;
pub mod metrics;
pub mod model;
pub mod params;
pub mod rng;
pub mod tensor;

pub use error::CoreError;
pub use tensor::Tensor;

/// Crate-wide result alias.
pub type Result<T> = core::result::Result<T, CoreError>;
