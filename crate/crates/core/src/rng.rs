//! Seeded random streams.
//!
//! Every source of randomness in the crate goes through [`stream`], which
//! derives an independent ChaCha stream from a base seed and a list of
//! counters (sample index, epoch, layer index, ...). Results therefore never
//! depend on iteration or thread order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Random stream for `seed` keyed by `counters`.
pub fn stream(seed: u64, counters: &[u64]) -> Rng {
    let mut key = splitmix64(seed);
    for &c in counters {
        key = splitmix64(key ^ splitmix64(c.wrapping_add(0x1234_5678)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(counters.len() as u64);
    rng
}
