//! Intrinsic adversarial robustness of small classifiers.
//!
//! The central quantity is `psi`, the inverse of the largest KL divergence
//! between a model's scale-normalized prediction on an input and on any
//! perturbation of that input inside an l-infinity ball. Around it sit the
//! pieces needed to study it: a feedforward network with exact gradients,
//! trainers for natural and defended models, gradient attacks, input-space
//! surface sampling, and an experiment harness.

pub mod attacks;
pub mod data;
pub mod error;
pub mod harness;
pub mod metric;
pub mod nn;
pub mod surface;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use nn::{LayerSpec, Network, ScalarObjective};
pub use tensor::Tensor;

/// ChaCha stream used for every seeded operation in the crate.
pub type Rng = rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> Rng {
    <Rng as rand::SeedableRng>::seed_from_u64(seed)
}
