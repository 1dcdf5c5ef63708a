use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Counter-based random streams addressed by `(purpose, episode, agent)`.
///
/// Each stream is an independent ChaCha8 generator whose key is derived from
/// the master seed and the address, so streams can be created in any order
/// (or in parallel) and still reproduce a serial run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngStreams {
    master: u64,
}

impl RngStreams {
    pub fn new(master: u64) -> Self {
        Self { master }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    pub fn stream(&self, purpose: &str, episode: u64, agent: u64) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.master.to_le_bytes());
        h.update((purpose.len() as u64).to_le_bytes());
        h.update(purpose.as_bytes());
        h.update(episode.to_le_bytes());
        h.update(agent.to_le_bytes());
        ChaCha8Rng::from_seed(h.finalize().into())
    }
}
