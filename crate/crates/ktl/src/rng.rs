//! Seed derivation so every pipeline phase gets an independent, reproducible stream.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Mixes a base seed with a phase tag and an index into a fresh sub-seed.
///
/// SplitMix64 finalizer; collisions between (tag, index) pairs are not a
/// practical concern at the corpus sizes involved.
pub fn derive_seed(base: u64, tag: &str, index: u64) -> u64 {
    let mut h = base ^ 0x9e37_79b9_7f4a_7c15;
    for &b in tag.as_bytes() {
        h = splitmix64(h ^ u64::from(b));
    }
    splitmix64(h ^ index)
}

/// RNG seeded for one phase of the pipeline.
pub fn rng_for(base: u64, tag: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tag, index))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distinct_tags_give_distinct_streams() {
        assert_ne!(derive_seed(7, "warmup", 0), derive_seed(7, "corpus", 0));
        assert_ne!(derive_seed(7, "warmup", 0), derive_seed(7, "warmup", 1));
        assert_eq!(derive_seed(7, "warmup", 3), derive_seed(7, "warmup", 3));
    }
}
