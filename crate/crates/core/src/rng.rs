//! Seed derivation. Every random draw in the crate comes from a ChaCha
//! stream keyed by a tuple of integers, so results never depend on call order
//! across unrelated components.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a key tuple into one 64-bit seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x5EED_u64, |acc, &p| splitmix(acc ^ splitmix(p)))
}

pub fn stream(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(parts))
}

/// Domain tags keeping independent streams apart.
pub mod tag {
    pub const PROTOTYPE: u64 = 1;
    pub const IMAGE: u64 = 2;
    pub const CLASS_PLAN: u64 = 3;
    pub const AUGMENT: u64 = 4;
    pub const INIT: u64 = 5;
    pub const LABELED_ORDER: u64 = 6;
    pub const UNLABELED_ORDER: u64 = 7;
    pub const SHUFFLE: u64 = 8;
}
