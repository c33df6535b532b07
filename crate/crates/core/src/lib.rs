//! A small laboratory for studying how sign gradient descent trains a
//! two-layer softmax attention model on sparse signal-plus-noise data.
//!
//! The crate is organised bottom-up:
//!
//! - [`data`]: the synthetic dataset generator and its concentration checks.
//! - [`model`]: parameters, forward pass, losses.
//! - [`grad`]: analytic gradients and a finite-difference oracle.
//! - [`optim`]: SignGD, GD (with optional momentum), Adam and the training loop.
//! - [`probe`]: inner-product snapshots and sign-alignment statistics.
//! - [`theory`]: predicted stage times, transition detection and verdicts.
//! - [`harness`]: config files, manifests, trace files, sweeps and reports.

pub mod data;
pub mod error;
pub mod grad;
pub mod harness;
pub mod model;
pub mod optim;
pub mod probe;
pub mod rng;
pub mod sparse;
pub mod stats;
pub mod theory;

pub use error::{Error, Result};
