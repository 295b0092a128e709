//! Seed derivation. Every source of randomness in a run draws from its own
//! named substream so that, for example, turning mixing off does not shift
//! the shuffling sequence.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a base seed with a path of names into a 64-bit substream seed.
pub fn derive_seed(seed: u64, path: &[&str]) -> u64 {
    let mut h = splitmix64(seed);
    for part in path {
        let mut f = FNV_OFFSET;
        for b in part.bytes() {
            f ^= u64::from(b);
            f = f.wrapping_mul(FNV_PRIME);
        }
        // separator so ["ab","c"] != ["a","bc"]
        f ^= 0xff;
        f = f.wrapping_mul(FNV_PRIME);
        h = splitmix64(h ^ f);
    }
    h
}

pub fn substream(seed: u64, path: &[&str]) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, path))
}
