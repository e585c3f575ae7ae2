//! Deterministic seed derivation.
//!
//! Every source of randomness in this crate is a [`rand_chacha::ChaCha8Rng`]
//! seeded through these helpers, so a run is fully determined by one base
//! seed. Derivation is a SplitMix64 chain, which is stable across platforms
//! and independent of pointer values, hash-map order or thread scheduling.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One SplitMix64 scramble step.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds an integer into a seed state.
pub fn mix_u64(state: u64, value: u64) -> u64 {
    splitmix64(state ^ splitmix64(value))
}

/// Folds a string into a seed state (FNV-1a over the bytes, then scrambled).
pub fn mix_str(state: u64, s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    mix_u64(state, h)
}

/// Deterministic RNG from a derived seed.
pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
