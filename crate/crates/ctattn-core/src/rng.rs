//! Seeded RNG streams. Every source of randomness in the crate flows from a
//! single master seed through a named substream, so data generation, parameter
//! init, dropout and Monte-Carlo sampling are independently reproducible.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a, used only to map stream names onto ChaCha stream ids.
fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Deterministic RNG for (`seed`, `name`). Distinct names give independent
/// streams of the same master seed.
pub fn stream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(name));
    rng
}
