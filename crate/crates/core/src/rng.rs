//! Deterministic random streams keyed by `(seed, domain, index)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const DOMAIN_INIT: u64 = 1;
pub const DOMAIN_STAGE1: u64 = 2;
pub const DOMAIN_STAGE2: u64 = 3;
pub const DOMAIN_AR: u64 = 4;
pub const DOMAIN_SAMPLE: u64 = 5;
pub const DOMAIN_EVAL: u64 = 6;

/// Independent ChaCha8 stream for `index` within `domain`.
pub fn stream(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((domain << 48) ^ index);
    rng
}
