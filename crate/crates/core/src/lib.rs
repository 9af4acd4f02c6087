//! Multi-layer sparse-autoencoder lab: a router plus shared TopK SAE trained
//! on multi-layer residual-stream activations, alongside ReLU, random-router,
//! and crosscoder baselines, with a deterministic toy transformer for
//! harvesting, activation-substitution evaluation, and feature steering.

pub mod config;
pub mod crosscoder;
pub mod envelope;
pub mod error;
pub mod eval;
pub mod interp;
pub mod optim;
pub mod real;
pub mod route;
pub mod synth;
pub mod trainer;
pub mod toylm;
pub mod sae;
pub mod store;

#[cfg(test)]
pub(crate) mod testsupport;

pub use error::{Error, Result};
