//! Deterministic seed derivation for parallel per-frame work.
//!
//! Every frame, attack, and Monte-Carlo draw derives its own child seed from
//! the run seed plus integer tags, so results are independent of thread
//! scheduling and iteration order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from a parent seed and a list of tags.
pub fn child_seed(seed: u64, tags: &[u64]) -> u64 {
    let mut z = splitmix64(seed);
    for &t in tags {
        z = splitmix64(z ^ t);
    }
    z
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
