//! Disentangled-interest CTR prediction.
//!
//! The crate is organised around one pipeline: tabular interaction data goes
//! in (`data`), optionally reshaped into distribution-shift variants (`ood`)
//! or generated from a known causal process (`synth`); models built on a
//! small reverse-mode tape (`autodiff`) are trained pairwise (`train`) and
//! scored (`metrics`); `experiment` wires the pieces into reproducible runs.

pub mod autodiff;
pub mod baselines;
pub mod data;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod ood;
pub mod params;
pub mod synth;
pub mod train;

pub use error::{Error, Result};

/// Splitmix64-style seed derivation so nested components (record streams,
/// batch shuffles, per-seed grid cells) get decorrelated yet reproducible
/// RNG seeds from one base seed.
pub fn derive_seed(base: u64, a: u64, b: u64) -> u64 {
    let mut x = base ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}
