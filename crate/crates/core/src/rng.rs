//! Deterministic named RNG streams.
//!
//! Every source of randomness in the library draws from a [`ChaCha8Rng`]
//! keyed by `(seed, purpose tag, stream index)` through SHA-256. Streams with
//! different tags or indices are statistically independent, and a run is
//! reproducible bit-for-bit from its seed regardless of how many streams the
//! code paths consume.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// A deterministic RNG stream for `(seed, tag, index)`.
pub fn stream(seed: u64, tag: &str, index: u64) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update([0xff]);
    hasher.update(tag.as_bytes());
    hasher.update([0xff]);
    hasher.update(index.to_le_bytes());
    let key: [u8; 32] = hasher.finalize().into();
    ChaCha8Rng::from_seed(key)
}

/// Hex digest identifying the stream family of a seed, recorded in
/// checkpoint headers so runs can be traced back to their seed.
pub fn seed_digest(seed: u64) -> String {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    let out = hasher.finalize();
    out.iter().take(8).map(|b| format!("{b:02x}")).collect()
}
