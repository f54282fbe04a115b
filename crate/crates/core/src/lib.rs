//! Multi-class boosting over small transformer text classifiers.
//!
//! The pipeline trains base classifiers round by round under a SAMME-style
//! instance reweighting, fuses the frozen members with an MLP over their
//! alpha-scaled class distributions, and can compress the ensemble into a
//! single student by distillation with teacher annealing. Bagging and a
//! decision-stump reference implementation live in [`baselines`].

pub mod baselines;
pub mod boosting;
pub mod cli;
pub mod distill;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod fusion;
pub mod synth;
pub mod textdata;

pub use error::{Error, Result};

/// Independent per-stream seed, `splitmix64(base + stream * golden)`.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base.wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
