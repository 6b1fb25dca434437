//! Deterministic random streams.
//!
//! Every consumer draws from a SplitMix64 generator (64-bit state) whose seed
//! is derived from a root seed plus a path of keys such as
//! `(iteration, set, sample)`. Streams are therefore independent of the order
//! in which work is scheduled, and reproducible across platforms.

use rand::{Rng as _, SeedableRng};
use rand_xoshiro::SplitMix64;

pub type Rng = SplitMix64;

/// SplitMix64 output function, used as the key mixer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, keys: &[u64]) -> u64 {
    keys.iter().fold(mix(seed), |acc, &k| mix(acc ^ mix(k)))
}

pub fn stream(seed: u64, keys: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, keys))
}

/// FNV-1a, for turning names into stream keys.
pub fn name_key(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

/// Uniform draw in `[lo, hi]`; collapses to `lo` when the interval is empty.
pub fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    let u: f64 = rng.gen();
    if hi > lo {
        lo + (hi - lo) * u
    } else {
        lo
    }
}
