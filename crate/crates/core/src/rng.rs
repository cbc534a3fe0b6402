//! Counter-based seeding: every random stream is derived from one base seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type LabRng = ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed for stream `counters` under `base`. Distinct counter tuples give
/// independent-looking seeds; the same tuple always gives the same seed.
pub fn derive_seed(base: u64, counters: &[u64]) -> u64 {
    counters
        .iter()
        .fold(splitmix64(base), |acc, c| splitmix64(splitmix64(acc) ^ c))
}

pub fn rng_for(base: u64, counters: &[u64]) -> LabRng {
    LabRng::seed_from_u64(derive_seed(base, counters))
}
