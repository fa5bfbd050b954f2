//! Global probabilistic multi-horizon forecasting over related count series.
//!
//! One model is trained across many county-level epidemic case series,
//! supplemented by a wastewater viral-load signal (a past-only covariate)
//! and policy/calendar covariates whose future values are known. Two model
//! families are provided: a dilated causal convolutional encoder-decoder
//! ([`deeptcn`]) and a fusion transformer with variable selection and
//! interpretable attention ([`tft`]). Both emit quantile forecasts trained
//! with pinball loss on a bespoke reverse-mode autodiff tape ([`tensor`]).
//!
//! The crate is `no_std` + `alloc`; all IO, file formats and the CLI live in
//! the companion `epicast-cli` crate.

#![no_std]
#![deny(unsafe_code)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod blocks;
pub mod deeptcn;
pub mod error;
pub mod eval;
pub mod panel;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod tft;
pub mod train;
pub mod window;

pub use error::{CoreError, Result};

/// Deterministic RNG used everywhere a seed is accepted.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Build the crate-wide RNG from a seed.
pub fn rng_from_seed(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}
