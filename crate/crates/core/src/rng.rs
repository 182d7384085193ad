//! Seeded random streams.
//!
//! One master seed feeds every module. Each consumer gets its own ChaCha
//! stream keyed by a stable label, so adding a consumer never shifts the
//! draws seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Stream = ChaCha8Rng;

/// Derives the stream for `label` from the master seed.
pub fn substream(master_seed: u64, label: &str) -> Stream {
    let mut h = Sha256::new();
    h.update(b"railchan-stream\0");
    h.update(master_seed.to_le_bytes());
    h.update(label.as_bytes());
    let digest: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(digest)
}

/// Derives an indexed child stream, e.g. one per simulated link.
pub fn indexed_substream(master_seed: u64, label: &str, index: u64) -> Stream {
    substream(master_seed, &format!("{label}#{index}"))
}
