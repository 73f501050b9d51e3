//! Seed derivation. Every random draw in the crate comes from a ChaCha stream whose
//! seed is a hash of (run seed, sample id, epoch or step, purpose), so any view can be
//! regenerated without replaying earlier draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[inline]
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Order-sensitive hash of a sequence of integers.
pub fn mix(parts: &[u64]) -> u64 {
    parts.iter().fold(0x6A09_E667_F3BC_C908, |acc, &p| splitmix(acc ^ splitmix(p)))
}

pub fn rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

pub fn rng_for(parts: &[u64]) -> Rng {
    rng(mix(parts))
}

/// Purpose tags keep streams for different consumers of the same sample independent.
pub mod purpose {
    pub const SCENE: u64 = 1;
    pub const RENDER: u64 = 2;
    pub const CAPTION: u64 = 3;
    pub const CROP: u64 = 4;
    pub const GECO: u64 = 5;
    pub const MASK: u64 = 6;
    pub const INIT: u64 = 7;
    pub const BATCH: u64 = 8;
    pub const RECAP: u64 = 9;
    pub const SPLIT: u64 = 10;
    pub const EVAL: u64 = 11;
}
