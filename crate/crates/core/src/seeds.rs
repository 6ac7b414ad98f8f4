//! Counter-based seed derivation.
//!
//! Every random stream in a run is keyed by the master seed plus a short
//! tuple of integers (stream tag, member, day, coefficient index, ...). Each
//! key word is absorbed with a SplitMix64 finalizer, so the seed for one task
//! never depends on how many other tasks ran before it or on which thread.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for the stream identified by `key` under `master`.
pub fn derive(master: u64, key: &[u64]) -> u64 {
    let mut state = mix(master.wrapping_add(GOLDEN));
    for (i, k) in key.iter().enumerate() {
        state = mix(state ^ mix(k.wrapping_add(GOLDEN.wrapping_mul(i as u64 + 2))));
    }
    state
}

/// ChaCha8 generator for the stream identified by `key`.
pub fn rng(master: u64, key: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(master, key))
}

/// Stream tags keeping unrelated uses of one master seed apart.
pub mod tag {
    pub const GP_FIELD: u64 = 1;
    pub const SYNTH_WEATHER: u64 = 2;
    pub const SYNTH_NOISE: u64 = 3;
    pub const SYNTH_COEF: u64 = 4;
}
