//! Seeded random streams.
//!
//! Every stochastic operation takes an explicit [`Stream`]. Streams are
//! ChaCha8 generators keyed by SHA-256 of `(seed, purpose)`, so two streams
//! with different purposes never share state and a run is reproducible from
//! its root seed alone.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Stream = ChaCha8Rng;

/// Derives the stream for `purpose` under root `seed`.
pub fn stream(seed: u64, purpose: &str) -> Stream {
    ChaCha8Rng::from_seed(derive_key(seed, purpose))
}

/// Derives a child seed; useful when a sub-task takes a plain `u64` seed.
pub fn child_seed(seed: u64, purpose: &str) -> u64 {
    let k = derive_key(seed, purpose);
    u64::from_le_bytes(k[..8].try_into().expect("8 bytes"))
}

fn derive_key(seed: u64, purpose: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((purpose.len() as u64).to_le_bytes());
    h.update(purpose.as_bytes());
    h.finalize().into()
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
