//! Named sub-seeds derived from one top-level seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Mixes a stage name into `seed` (FNV-1a over the name, then splitmix).
pub fn sub_seed(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix64(seed ^ splitmix64(h))
}

/// Sub-seed indexed by an integer, e.g. a view ID.
pub fn indexed_seed(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(index.wrapping_add(0x5851_f42d_4c95_7f2d)))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_separate_streams() {
        assert_ne!(sub_seed(1, "scene"), sub_seed(1, "init"));
        assert_ne!(sub_seed(1, "scene"), sub_seed(2, "scene"));
        assert_eq!(sub_seed(9, "noise"), sub_seed(9, "noise"));
        assert_ne!(indexed_seed(3, 0), indexed_seed(3, 1));
    }
}
