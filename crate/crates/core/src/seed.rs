//! Deterministic seed derivation.
//!
//! Every random stream in a run is keyed by the master seed plus a path of
//! integers (fold, repetition, client id, role, ...). Streams with different
//! paths are statistically independent but fully reproducible.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Role tags mixed into derived seeds.
pub mod role {
    pub const PARTITION: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const INIT: u64 = 3;
    pub const ATTACK: u64 = 4;
    pub const MALICIOUS_SELECTION: u64 = 5;
    pub const SERVER: u64 = 6;
    pub const SYNTH: u64 = 7;
    pub const GRID: u64 = 8;
    pub const CLIENT: u64 = 9;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hash `master` together with `path` into a new 64-bit seed.
pub fn derive(master: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix64(master), |acc, &p| {
        splitmix64(acc ^ splitmix64(p))
    })
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derived_rng(master: u64, path: &[u64]) -> ChaCha8Rng {
    rng(derive(master, path))
}
