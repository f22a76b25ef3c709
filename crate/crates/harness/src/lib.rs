//! Desk-scale experiment harness for the tracker in `sft-core`: synthetic
//! sequences, toy training, tracking metrics, the attention spectrum
//! experiment, checkpoints and the `sft` command line.

pub mod checkpoint;
pub mod cli;
pub mod config;
mod error;
pub mod export;
pub mod gradcheck;
pub mod metrics;
pub mod spectrum;
pub mod synth;
pub mod train;

pub use error::{HarnessError, Result};

/// Derives an independent 64-bit seed for stream `tag`, item `index` from a
/// base seed (SplitMix64 finalizer over the mixed inputs).
pub fn derive_seed(base: u64, tag: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed stream tags.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const TRAIN_SEQ: u64 = 2;
    pub const TEST_SEQ: u64 = 3;
    pub const SAMPLER: u64 = 4;
    pub const DROPOUT: u64 = 5;
    pub const SPECTRUM: u64 = 6;
    pub const TRACK_SEQ: u64 = 7;
}
