//! Named substreams derived from a single master seed.
//!
//! Every source of randomness in the crate draws from `stream(seed, label,
//! index)` so that runs are reproducible and independent of thread count or
//! call order.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// FNV-1a over the label, mixed with the master seed and an index.
pub fn stream(seed: u64, label: &str, index: u64) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in label.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h ^= seed.wrapping_mul(0x9e3779b97f4a7c15);
    h ^= index.wrapping_add(0xd1b54a32d192ed03).rotate_left(23);
    // splitmix64 finalizer
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d049bb133111eb);
    h ^ (h >> 31)
}

/// Seeded RNG for a named substream.
pub fn rng(seed: u64, label: &str, index: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(stream(seed, label, index))
}
