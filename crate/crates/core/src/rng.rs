//! Deterministic random streams.
//!
//! Every stochastic step derives its generator from a root seed plus a tag
//! path (step index, particle index, ...). Results therefore do not depend
//! on how work is split across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a root seed with a path of tags into a single 64-bit seed.
pub fn derive_seed(root: u64, tags: &[u64]) -> u64 {
    let mut h = splitmix64(root);
    for &t in tags {
        h = splitmix64(h ^ splitmix64(t.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    h
}

pub fn stream(root: u64, tags: &[u64]) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(root, tags))
}

/// Tags for the distinct consumers of randomness, so streams never collide.
pub mod tag {
    pub const PRIOR: u64 = 1;
    pub const PROPOSAL: u64 = 2;
    pub const RESAMPLE: u64 = 3;
    pub const JITTER: u64 = 4;
    pub const CHAIN: u64 = 5;
    pub const INIT: u64 = 6;
    pub const PPP: u64 = 7;
    pub const PATTERNS: u64 = 8;
    pub const FOLD: u64 = 9;
    pub const SIMULATE: u64 = 10;
    pub const SHUFFLE: u64 = 11;
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
