//! Deterministic seed derivation.
//!
//! Every run owns its generators. Sub-streams are derived from a base seed
//! with the SplitMix64 finalizer so that replicate `i` of exploration rate
//! `j` never shares a stream with any other replicate.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Generator used by all simulations.
pub type SimRng = ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with two indices: `mix(seed, replicate, beta_index)`.
pub fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let h = splitmix64(seed);
    let h = splitmix64(h ^ a.wrapping_mul(GOLDEN));
    splitmix64(h ^ b.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

pub fn rng_from(seed: u64) -> SimRng {
    SimRng::seed_from_u64(seed)
}

/// Stream tags for the independent generators inside a single run.
#[derive(Debug, Clone, Copy)]
pub(crate) enum Stream {
    Process = 1,
    Exploration = 2,
    Probes = 3,
}

pub(crate) fn stream(seed: u64, which: Stream) -> SimRng {
    rng_from(mix_seed(seed, which as u64, 0x5AFE))
}
