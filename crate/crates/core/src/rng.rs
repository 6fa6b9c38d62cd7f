//! Keyed RNG streams. Every random draw in the simulator comes from a stream
//! keyed by the experiment seed plus a purpose tag and coordinates, so the
//! order in which clients execute never changes what they sample.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a seed with an ordered list of keys into a new 64-bit seed.
pub fn derive_seed(seed: u64, keys: &[u64]) -> u64 {
    keys.iter()
        .fold(splitmix64(seed), |acc, &k| splitmix64(acc ^ splitmix64(k)))
}

pub fn keyed_rng(seed: u64, keys: &[u64]) -> SimRng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, keys))
}

// Purpose tags keep streams for different subsystems disjoint.
pub(crate) const TAG_INIT: u64 = 1;
pub(crate) const TAG_PARTITION: u64 = 2;
pub(crate) const TAG_BLOBS: u64 = 3;
pub(crate) const TAG_QUADRATIC: u64 = 4;
pub(crate) const TAG_BATCH: u64 = 5;
pub(crate) const TAG_SAMPLING: u64 = 6;
pub(crate) const TAG_SURFACE: u64 = 7;
