//! Deterministic random-number streams.
//!
//! Every stochastic draw in the pipeline descends from one experiment seed
//! through named streams (`split`, `target`, `shadow`, `attack`, `defense`)
//! and integer tag paths (step, sample id, view index). Generators are
//! re-derived from `(seed, name, tags)` on demand instead of being threaded
//! through the call graph, so any step can be replayed in isolation and a
//! resumed run continues exactly where an uninterrupted one would be.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

const DOMAIN: &[u8] = b"semileak.rng.v1";

/// Root of one named stream, cheap to copy and to derive children from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamSeed([u8; 32]);

/// Derive the named sub-stream of an experiment seed.
pub fn stream(seed: u64, name: &str) -> StreamSeed {
    let mut h = Sha256::new();
    h.update(DOMAIN);
    h.update(seed.to_le_bytes());
    h.update([0x1f]);
    h.update(name.as_bytes());
    StreamSeed(h.finalize().into())
}

impl StreamSeed {
    /// Child stream for a named sub-role (e.g. a per-model init stream).
    pub fn child(&self, name: &str) -> StreamSeed {
        let mut h = Sha256::new();
        h.update(DOMAIN);
        h.update(self.0);
        h.update([0x2f]);
        h.update(name.as_bytes());
        StreamSeed(h.finalize().into())
    }

    /// Generator at an integer tag path, e.g. `[step, sample_id, view]`.
    pub fn rng(&self, tags: &[u64]) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(DOMAIN);
        h.update(self.0);
        h.update([0x3f]);
        for t in tags {
            h.update(t.to_le_bytes());
        }
        let key: [u8; 32] = h.finalize().into();
        ChaCha8Rng::from_seed(key)
    }
}
