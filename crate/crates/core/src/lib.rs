//! Predictive-accuracy active learning for image segmentation.
//!
//! The crate is organised bottom-up:
//!
//! - [`nn`]: a small dense-tensor network engine (conv/dense layers, backprop,
//!   AdamW, cosine schedule, finite-difference checking).
//! - [`models`]: the toy segmentation network and the accuracy predictor.
//! - [`metrics`]: Dice, the Dice+CE and MSE losses, uncertainty scores.
//! - [`data`]: the synthetic dataset generator, its binary file format and
//!   five-fold splitting.
//! - [`kmeans`]: seeded k-means++ / Lloyd clustering.
//! - [`query`]: the weighted polling strategy and every baseline selector.
//! - [`active`]: pool bookkeeping and the incremental-query training loop.

pub mod active;
pub mod data;
mod error;
pub mod kmeans;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod query;

pub use error::{Error, Result};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The one PRNG used everywhere. Seeds are explicit `u64`s.
pub type Rng = ChaCha8Rng;

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream seed from a base seed and a tag.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    // splitmix64 finaliser
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
