//! Counter-based random streams.
//!
//! Every draw is keyed by `(seed, index)`: sample `i` always sees the same
//! ChaCha8 stream, so results do not depend on how indices are split
//! across worker threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct CounterRng {
    base: ChaCha8Rng,
}

impl CounterRng {
    pub fn new(seed: u64) -> Self {
        CounterRng {
            base: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream for one sample index.
    pub fn stream(&self, index: u64) -> ChaCha8Rng {
        let mut r = self.base.clone();
        r.set_stream(index);
        r
    }
}

/// Derive a sub-seed for a named purpose so that distinct checks sharing a
/// user seed do not reuse streams.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    // FNV-1a over the tag, folded with the seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let c = CounterRng::new(7);
        let a: u64 = c.stream(3).random();
        let b: u64 = c.stream(3).random();
        let d: u64 = c.stream(4).random();
        assert_eq!(a, b);
        assert_ne!(a, d);
    }

    #[test]
    fn derived_seeds_differ_by_tag() {
        assert_ne!(derive_seed(1, "a"), derive_seed(1, "b"));
        assert_eq!(derive_seed(1, "a"), derive_seed(1, "a"));
    }
}
