//! Keyed random streams so that results do not depend on iteration or thread order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic generator for the stream identified by `seed` and `keys`.
pub fn keyed_rng(seed: u64, keys: &[u64]) -> ChaCha8Rng {
    let mut h = splitmix(seed);
    for &k in keys {
        h = splitmix(h ^ splitmix(k));
    }
    ChaCha8Rng::seed_from_u64(h)
}
