//! Deterministic seed derivation.
//!
//! Every random draw in the crate flows from one master seed through named,
//! index-tagged streams: `derive_seed(master, "encoder-init", 0)`,
//! `derive_seed(master, "step", t)`, and so on. Two properties matter:
//!
//! * streams for different (tag, index) pairs are statistically independent,
//!   so reordering initialization code never silently reuses a stream;
//! * a stream is reconstructible from `(master, tag, index)` alone, which is
//!   what makes checkpoint resume bit-exact — the trainer never carries RNG
//!   state across steps, it re-derives it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a over the tag bytes, then two SplitMix64 finalization rounds mixing
/// in the master seed and index. Not cryptographic; just well-spread.
pub fn derive_seed(master: u64, tag: &str, index: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in tag.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix(splitmix(h ^ master) ^ index)
}

/// ChaCha8 stream for a named purpose under a master seed.
pub fn stream(master: u64, tag: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, tag, index))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
