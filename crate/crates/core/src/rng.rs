//! Reproducible random streams.
//!
//! Every random draw in the crate comes from a [`RngSeed`], a pair of
//! `(master, stream)`. The generator is ChaCha8 from `rand_chacha`: the
//! master seed keys the cipher and the stream id selects ChaCha's 64-bit
//! stream, so distinct streams never overlap and no coordination between
//! workers is needed. Hierarchical seeds (scenario, method, trial, dataset)
//! are folded into a stream id with [`RngSeed::derive`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Name and version of the generator, recorded in every run manifest.
pub const GENERATOR: &str = "ChaCha8 (rand_chacha 0.9, seed_from_u64 + set_stream)";

/// Seed used when the caller does not supply one.
pub const DEFAULT_MASTER_SEED: u64 = 20_240_917;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngSeed {
    pub master: u64,
    pub stream: u64,
}

impl RngSeed {
    pub const fn new(master: u64, stream: u64) -> Self {
        Self { master, stream }
    }

    pub const fn from_master(master: u64) -> Self {
        Self { master, stream: 0 }
    }

    /// The generator for this `(master, stream)` pair.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master);
        rng.set_stream(self.stream);
        rng
    }

    /// Stream `base + offset`, used for the members of an ensemble.
    pub const fn offset(&self, offset: u64) -> Self {
        Self {
            master: self.master,
            stream: self.stream.wrapping_add(offset),
        }
    }

    /// Hash a path of tags into a fresh stream id under the same master.
    pub fn derive(&self, tags: &[u64]) -> Self {
        let mut h = splitmix64(self.stream ^ 0x6a09_e667_f3bc_c908);
        for &tag in tags {
            h = splitmix64(h ^ splitmix64(tag.wrapping_add(0x9e37_79b9_7f4a_7c15)));
        }
        Self {
            master: self.master,
            stream: h,
        }
    }
}

impl Default for RngSeed {
    fn default() -> Self {
        Self::from_master(DEFAULT_MASTER_SEED)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
