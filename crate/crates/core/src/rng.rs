//! Seed derivation and random streams.
//!
//! Every stochastic evaluation owns its generator. Seeds for nested work
//! (walker, step, replication, particle) are derived by hashing the parent
//! seed with integer tags, so results never depend on evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Generator used for all process noise, proposals and resampling.
pub type NoiseRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a parent seed with a sequence of tags into a child seed.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(seed), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

/// Generator for stream `stream` of the family keyed by `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> NoiseRng {
    let mut rng = NoiseRng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
