//! Deterministic RNG stream derivation.
//!
//! Every parallel task draws from its own `ChaCha8Rng` whose seed is a hash of
//! a root seed and the task's coordinates, so results do not depend on how the
//! work is scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_xoshiro::Xoshiro256PlusPlus;

pub type StreamRng = ChaCha8Rng;
/// Cheaper generator for the inner loops of path simulations.
pub type FastRng = Xoshiro256PlusPlus;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a root seed with an arbitrary tuple of stream coordinates.
pub fn derive_seed(root: u64, coords: &[u64]) -> u64 {
    let mut h = splitmix64(root);
    for &c in coords {
        h = splitmix64(h ^ splitmix64(c.wrapping_add(0xA076_1D64_78BD_642F)));
    }
    h
}

pub fn stream(root: u64, coords: &[u64]) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, coords))
}

pub fn fast_stream(root: u64, coords: &[u64]) -> FastRng {
    Xoshiro256PlusPlus::seed_from_u64(derive_seed(root, coords))
}

pub fn seeded(seed: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = stream(7, &[1, 2]).random();
        let b: u64 = stream(7, &[1, 2]).random();
        let c: u64 = stream(7, &[2, 1]).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
