//! Deterministic random-stream derivation.
//!
//! All randomness flows from named ChaCha8 streams derived by hashing a
//! root seed with a purpose tag and integer or string qualifiers. Streams
//! are independent of call order and of each other, which is what makes
//! whole-pipeline runs bit-reproducible: the k-th utterance's noise does
//! not depend on how many random draws anything else consumed.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// 32-byte stream key from (seed, tag, integer qualifiers).
pub fn derive_key(seed: u64, tag: &str, parts: &[u64]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((tag.len() as u64).to_le_bytes());
    h.update(tag.as_bytes());
    for p in parts {
        h.update(p.to_le_bytes());
    }
    h.finalize().into()
}

/// ChaCha8 stream keyed by (seed, tag, integer qualifiers).
pub fn derive_rng(seed: u64, tag: &str, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(derive_key(seed, tag, parts))
}

/// ChaCha8 stream keyed by (seed, tag, string qualifier) — used where the
/// qualifier is an utterance or speaker identifier rather than an index.
pub fn derive_rng_str(seed: u64, tag: &str, qualifier: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((tag.len() as u64).to_le_bytes());
    h.update(tag.as_bytes());
    h.update((qualifier.len() as u64).to_le_bytes());
    h.update(qualifier.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// One standard-normal draw via Box-Muller. Always consumes exactly two
/// uniforms, keeping downstream stream layouts easy to reason about.
pub fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    use rand::Rng;
    // gen::<f64>() is in [0, 1); flip to (0, 1] so the log is finite.
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
