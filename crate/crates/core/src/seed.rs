//! Deterministic seed splitting.
//!
//! Every random decision in the toolkit derives from one 64-bit root seed.
//! A child seed is obtained by mixing the parent with a named stream id
//! (hashed with FNV-1a) and an optional integer index through SplitMix64,
//! so partial reruns of one stage reproduce exactly regardless of what
//! other stages consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// One SplitMix64 output step.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Child seed for a named stream.
pub fn derive(seed: u64, stream: &str) -> u64 {
    splitmix64(seed ^ fnv1a(stream.as_bytes()))
}

/// Child seed for the `index`-th unit of a named stream.
pub fn derive_indexed(seed: u64, stream: &str, index: u64) -> u64 {
    splitmix64(derive(seed, stream) ^ splitmix64(index))
}

/// Seeded generator used throughout the crate.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
