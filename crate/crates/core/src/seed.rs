//! Named random sub-streams derived from one user seed.
//!
//! Each component (balancing, splitting, initialisation, shuffling, ...) draws
//! from its own ChaCha stream so changing how much randomness one of them
//! consumes never perturbs the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const BALANCE: &str = "balance";
pub const SPLIT: &str = "split";
pub const INIT: &str = "init";
pub const SHUFFLE: &str = "shuffle";
pub const GENERATE: &str = "generate";

/// Environment variable consulted when no seed is given explicitly.
pub const SEED_ENV: &str = "IHAN_SEED";

pub fn stream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(name.as_bytes()));
    rng
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}
