//! Seed plumbing. Every stochastic operation takes an explicit `u64` seed and
//! builds its own generator, so no sampling state is shared.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn rng_from(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed for `(parent, stream, index)`; distinct streams keep
/// unrelated consumers (masking, negatives, batching) independent.
pub fn derive_seed(parent: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(parent) ^ stream) ^ index)
}

/// Stream tags for [`derive_seed`].
pub mod stream {
    pub const BATCH: u64 = 1;
    pub const TOKEN_MASK: u64 = 2;
    pub const PATCH_MASK: u64 = 3;
    pub const SUBGRAPH: u64 = 4;
    pub const HOLDOUT: u64 = 5;
    pub const NEGATIVES: u64 = 6;
    pub const INIT: u64 = 7;
    pub const CORPUS: u64 = 8;
    pub const DESCRIPTION: u64 = 9;
    pub const EXAMPLE: u64 = 10;
    pub const STEP: u64 = 11;
}
