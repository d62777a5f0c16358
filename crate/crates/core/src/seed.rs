//! Seed derivation and the crate-wide generator type.
//!
//! Every random stream is a ChaCha8 generator seeded from a 64-bit value, so
//! results depend only on the seed and not on platform or worker count. Child
//! streams (per repeat, per trial) are derived with [`derive`], a SplitMix64
//! finalizer applied to `master ^ golden * (index + 1)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sub-seed for child stream `index` of `master`.
pub fn derive(master: u64, index: u64) -> u64 {
    mix64(master ^ GOLDEN.wrapping_mul(index.wrapping_add(1)))
}

/// Sub-seed for a named purpose, so streams for different pipeline stages of
/// one repeat never collide.
pub fn derive_tagged(master: u64, tag: &str, index: u64) -> u64 {
    let t = tag
        .bytes()
        .fold(0xCBF2_9CE4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01B3));
    derive(mix64(master ^ t), index)
}

pub fn rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn derive_is_stable() {
        // frozen values: the derivation is part of the reproducibility contract
        assert_eq!(mix64(0), 0);
        assert_eq!(derive(0, 0), mix64(GOLDEN));
        assert_ne!(derive(1, 0), derive(1, 1));
        assert_ne!(derive_tagged(1, "network", 0), derive_tagged(1, "dataset", 0));
    }

    #[test]
    fn same_seed_same_stream() {
        let a: Vec<u64> = (0..8).map({
            let mut r = rng(7);
            move |_| r.random()
        }).collect();
        let b: Vec<u64> = (0..8).map({
            let mut r = rng(7);
            move |_| r.random()
        }).collect();
        assert_eq!(a, b);
    }
}
