//! Seed derivation.
//!
//! Every random stream in the crate is a ChaCha8 generator keyed by a 64-bit
//! seed. Sub-seeds are derived from `(base, stream, index)` with the
//! SplitMix64 finalizer so that per-class, per-epoch, and per-query streams
//! never depend on evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags used with [`derive`]. Keeping them in one place avoids two
/// subsystems accidentally sharing a stream.
pub mod stream {
    pub const WEIGHTS: u64 = 1;
    pub const EPOCH_SHUFFLE: u64 = 2;
    pub const GEN_CLASS: u64 = 3;
    pub const GEN_TASK: u64 = 4;
    pub const SPLIT: u64 = 5;
    pub const QUERY_NOISE: u64 = 6;
    pub const KMEANS: u64 = 7;
    pub const VICTIM: u64 = 8;
    pub const EXPERIMENT: u64 = 9;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent sub-seed for `(stream, index)` under `base`.
pub fn derive(base: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(base) ^ stream) ^ index)
}

/// The crate-wide deterministic generator.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
