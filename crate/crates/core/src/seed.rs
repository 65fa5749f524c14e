//! Seed splitting.
//!
//! Every randomized task owns a ChaCha stream seeded by
//! `derive(parent, tag, index)`: the FNV-1a hash of `tag` is mixed with the
//! parent seed and the task index through SplitMix64 finalizers. Streams for
//! distinct `(tag, index)` pairs are independent of evaluation order, so
//! parallel and sequential runs produce identical artifacts.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(tag: &str) -> u64 {
    tag.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

pub fn derive(parent: u64, tag: &str, index: u64) -> u64 {
    splitmix(splitmix(parent ^ fnv1a(tag)).wrapping_add(index))
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn child_rng(parent: u64, tag: &str, index: u64) -> Rng {
    rng(derive(parent, tag, index))
}
