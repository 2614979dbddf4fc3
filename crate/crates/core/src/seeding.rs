//! Deterministic RNG derivation.
//!
//! Every random decision in a run is drawn from a ChaCha8 stream derived from
//! the master seed plus a purpose label, so independent pipeline stages stay
//! reproducible and uncorrelated even when their call order changes.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; good avalanche for cheap stream separation.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn label_hash(label: &str) -> u64 {
    // FNV-1a, stable across platforms.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// RNG for a (master seed, purpose) pair.
pub fn rng_for(master: u64, purpose: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(master ^ label_hash(purpose)))
}

/// RNG for a (master seed, purpose, index) triple, e.g. per-episode streams.
pub fn rng_for_indexed(master: u64, purpose: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(mix(master ^ label_hash(purpose)) ^ index))
}

/// Stable per-episode seed used for paired cross-condition comparisons.
pub fn episode_seed(master: u64, index: u64) -> u64 {
    mix(mix(master ^ label_hash("episode")) ^ index)
}
