//! Per-replica random streams.
//!
//! Every replica draws from its own ChaCha8 stream: the key comes from the
//! master seed and the 64-bit stream id is the replica index. Streams are
//! independent by construction, so results do not depend on which worker
//! runs which replica.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StreamSeed {
    pub master: u64,
    pub stream: u64,
}

impl StreamSeed {
    pub fn new(master: u64, stream: u64) -> Self {
        Self { master, stream }
    }

    /// Stream of replica `index` under `master`.
    pub fn replica(master: u64, index: usize) -> Self {
        Self { master, stream: index as u64 }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master);
        rng.set_stream(self.stream);
        rng
    }
}
