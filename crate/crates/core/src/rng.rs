//! Named, seeded random streams.
//!
//! Every consumer of randomness derives its own ChaCha stream from
//! `(seed, name, index)`, so adding draws in one place never perturbs
//! another.

use core::hash::Hasher;

use fnv::FnvHasher;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn derive_seed(seed: u64, name: &str, index: u64) -> u64 {
    let mut h = FnvHasher::default();
    h.write(&seed.to_le_bytes());
    h.write(name.as_bytes());
    h.write(&[0xff]);
    h.write(&index.to_le_bytes());
    h.finish()
}

pub fn stream(seed: u64, name: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, name, index))
}

/// Uniform in [0, 1) with 53 bits of precision.
pub fn unit_f64(bits: u64) -> f64 {
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}
