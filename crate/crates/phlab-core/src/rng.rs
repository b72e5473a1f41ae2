//! Deterministic derivation of independent random streams.
//!
//! Every randomized stage (weight init, batch shuffling, initial conditions,
//! measurement noise) draws from its own ChaCha stream derived from the user
//! seed and a fixed purpose tag. Adding draws to one stage therefore never
//! shifts the randomness seen by another, and per-trajectory streams make
//! data generation order-independent.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tag: network weight initialization.
pub const TAG_INIT: u64 = 1;
/// Purpose tag: batch shuffling during training.
pub const TAG_SHUFFLE: u64 = 2;
/// Purpose tag: trajectory initial conditions.
pub const TAG_INITIAL_CONDITION: u64 = 3;
/// Purpose tag: measurement noise.
pub const TAG_NOISE: u64 = 4;
/// Purpose tag: evaluation state sampling.
pub const TAG_EVAL: u64 = 5;

/// SplitMix64 finalizer; a cheap, well-distributed u64 -> u64 mix.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive the stream `(tag, index)` from a master seed.
pub fn stream(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    let mut h = splitmix64(seed);
    h = splitmix64(h ^ splitmix64(tag));
    h = splitmix64(h ^ splitmix64(index));
    ChaCha8Rng::seed_from_u64(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let mut a0 = stream(7, TAG_INIT, 0);
        let mut a1 = stream(7, TAG_INIT, 0);
        let mut b = stream(7, TAG_INIT, 1);
        let mut c = stream(7, TAG_SHUFFLE, 0);
        let xs: [u64; 4] = core::array::from_fn(|_| a0.next_u64());
        let ys: [u64; 4] = core::array::from_fn(|_| a1.next_u64());
        assert_eq!(xs, ys, "same (seed, tag, index) must replay identically");
        assert_ne!(xs[0], b.next_u64(), "different index should decorrelate");
        assert_ne!(xs[0], c.next_u64(), "different tag should decorrelate");
    }
}
