//! Seeded RNG plumbing.
//!
//! All randomness in the pipeline flows from one root seed. Each stage (and
//! each repeated run inside a stage) draws from a named substream so stages
//! can be re-run independently and still reproduce byte-identical output.

use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;
use sha2::{Digest, Sha256};

/// Derive a substream seed from a root seed and a stream name.
pub fn substream_seed(root: u64, name: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(root.to_le_bytes());
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// RNG for a named substream of the root seed.
pub fn substream(root: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(substream_seed(root, name))
}

/// RNG seeded directly (for operations whose contract names a seed).
pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
