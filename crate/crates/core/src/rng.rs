//! Deterministic, parallel-safe random streams.
//!
//! Every stream is keyed by the counters `(master seed, replicate, center,
//! stream)` packed into a ChaCha key, so replicates never share state and
//! results do not depend on thread count or scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Sub-stream selector within one `(seed, replicate, center)` cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Covariates,
    Outcomes,
}

impl Stream {
    fn index(self) -> u64 {
        match self {
            Stream::Covariates => 0,
            Stream::Outcomes => 1,
        }
    }
}

/// Generator for one `(master seed, replicate, center, stream)` cell.
pub fn stream_rng(master_seed: u64, replicate: u64, center: u64, stream: Stream) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&master_seed.to_le_bytes());
    key[8..16].copy_from_slice(&replicate.to_le_bytes());
    key[16..24].copy_from_slice(&center.to_le_bytes());
    key[24..32].copy_from_slice(&stream.index().to_le_bytes());
    ChaCha8Rng::from_seed(key)
}
