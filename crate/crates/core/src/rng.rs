//! Named random sub-streams derived from a master seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// The random stream type used throughout the crate.
pub type SimRng = ChaCha8Rng;

/// `sha256(master ‖ name)` truncated to 64 bits.
pub fn derive_seed(master: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

pub fn stream(master: u64, name: &str) -> SimRng {
    SimRng::seed_from_u64(derive_seed(master, name))
}

/// Stream for the `index`-th item of a named sequence (e.g. training step k).
pub fn indexed_stream(master: u64, name: &str, index: u64) -> SimRng {
    stream(derive_seed(master, name), &index.to_string())
}
