//! Seed derivation for independent, order-insensitive random streams.
//!
//! Every source of randomness in a run is a `ChaCha8Rng` seeded from the
//! experiment seed mixed with a stream tag. Streams depend only on their
//! tags, never on execution order, so clients can be processed in any
//! order (or in parallel) with bit-identical results.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; decorrelates consecutive tag values.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Fold a list of tags into a single derived seed.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut acc = splitmix64(base);
    for &t in tags {
        acc = splitmix64(acc ^ splitmix64(t));
    }
    acc
}

/// Deterministic stream for `(base, tags)`.
pub fn stream(base: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tags))
}

// Stream tags; fixed constants so layouts never collide across purposes.
pub const TAG_MODEL: u64 = 1;
pub const TAG_ADAPTER: u64 = 2;
pub const TAG_RULE: u64 = 3;
pub const TAG_TRAIN_ENV: u64 = 4;
pub const TAG_INTRA_OOD_ENV: u64 = 5;
pub const TAG_HELDOUT_ENV: u64 = 6;
pub const TAG_SAMPLING: u64 = 7;
pub const TAG_CLIENT: u64 = 8;
pub const TAG_BAYES: u64 = 9;
pub const TAG_PROBE: u64 = 10;

/// Path selector within a client's round: personalized vs global updates.
pub const PATH_PERSONALIZED: u64 = 0;
pub const PATH_GLOBAL: u64 = 1;
