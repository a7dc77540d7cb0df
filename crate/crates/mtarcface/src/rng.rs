//! Keyed deterministic random streams.
//!
//! Every source of randomness in the pipeline draws from a ChaCha stream
//! keyed by `(master_seed, domain, indices...)`. Streams for different keys
//! are independent, so work keyed per image or per step can be scheduled in
//! any order (or in parallel) without changing a single output byte.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream domains. Keeping them in one enum avoids accidental key collisions
/// between subsystems that share a master seed.
#[derive(Debug, Clone, Copy)]
pub enum Domain {
    MaskSpec = 1,
    Shuffle = 2,
    Bernoulli = 3,
    ParamInit = 4,
    Dropout = 5,
    Fixture = 6,
    Pairs = 7,
}

/// splitmix64 finalizer; mixes a key component into the running state.
fn mix(state: u64, value: u64) -> u64 {
    let mut z = state
        .wrapping_add(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(value);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A ChaCha stream keyed by `(seed, domain, indices)`.
pub fn stream(seed: u64, domain: Domain, indices: &[u64]) -> ChaCha8Rng {
    let mut key = mix(seed, domain as u64);
    for &ix in indices {
        key = mix(key, ix);
    }
    ChaCha8Rng::seed_from_u64(key)
}
