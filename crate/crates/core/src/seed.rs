//! Seed derivation. Every datapoint, pair and training run derives its own
//! stream from a root seed and a path of integers, so results never depend on
//! iteration order or worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Environment variable that overrides configured seeds.
pub const SEED_ENV: &str = "VCE_SEED";

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(root: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(root), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng_for(root: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, path))
}

/// Applies the `VCE_SEED` override, if set and parseable.
pub fn resolve_seed(configured: u64) -> u64 {
    std::env::var(SEED_ENV)
        .ok()
        .and_then(|s| s.trim().parse().ok())
        .unwrap_or(configured)
}
