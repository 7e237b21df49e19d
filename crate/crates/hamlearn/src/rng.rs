//! Deterministic RNG streams.
//!
//! Every random draw in the crate comes from a stream derived from a master seed
//! plus a path of integer tags (λ index, window index, purpose, member, trial...).
//! Derivation is a splitmix64 chain, so streams are independent of scheduling:
//! parallel workers each derive their own stream and produce the same bytes no
//! matter how work is distributed.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The crate's stream RNG.
pub type Stream = ChaCha8Rng;

/// One splitmix64 scramble round.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a seed and a tag path.
pub fn derive(seed: u64, path: &[u64]) -> u64 {
    let mut s = splitmix64(seed);
    for &t in path {
        s = splitmix64(s ^ splitmix64(t.wrapping_add(0xa076_1d64_78bd_642f)));
    }
    s
}

/// A ready-to-use stream for the given seed and tag path.
pub fn stream(seed: u64, path: &[u64]) -> Stream {
    ChaCha8Rng::seed_from_u64(derive(seed, path))
}

/// Purpose tags separating draw kinds that share a (seed, λ, window) path.
pub mod tag {
    pub const INIT_COND: u64 = 1;
    pub const NOISE: u64 = 2;
    pub const OFFSET: u64 = 3;
    pub const SPLIT: u64 = 4;
    pub const WEIGHTS: u64 = 5;
    pub const TRIAL: u64 = 6;
    pub const EVAL: u64 = 7;
    pub const BATCH: u64 = 8;
}
