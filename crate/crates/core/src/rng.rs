//! Seed expansion. Every random stream in a run derives from one root seed
//! and a purpose label, so reruns are byte-identical.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed for `purpose` from `root`.
pub fn derive_seed(root: u64, purpose: &str) -> u64 {
    let mut h = FNV_OFFSET;
    for b in purpose.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    splitmix64(root ^ splitmix64(h))
}

/// Child seed for an indexed purpose such as a node or an iteration.
pub fn derive_indexed(root: u64, purpose: &str, index: u64) -> u64 {
    splitmix64(derive_seed(root, purpose) ^ splitmix64(index.wrapping_add(1)))
}

pub fn rng_for(root: u64, purpose: &str) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(derive_seed(root, purpose))
}

pub fn rng_indexed(root: u64, purpose: &str, index: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(derive_indexed(root, purpose, index))
}
