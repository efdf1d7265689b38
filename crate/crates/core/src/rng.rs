//! Deterministic random streams.
//!
//! Every module instance draws from its own [`SimRng`], keyed by the scenario
//! seed and a stream id. The generator is ChaCha8 (`rand_chacha`) with the
//! seed expanded to a 256-bit key and the stream id written into the ChaCha
//! stream/nonce word, so streams never overlap and the sequence depends only
//! on `(seed, stream_id)`. Gaussian variates use the ziggurat sampler from
//! `rand_distr`; both crates are pinned by `Cargo.lock`.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Well-known stream ids. Per-agent streams add the agent index.
pub mod streams {
    pub const TASK_MODEL: u64 = 1;
    pub const REFERENCE: u64 = 2;
    pub const CODEC_INIT: u64 = 3;
    pub const CODEC_PRETRAIN: u64 = 4;
    pub const PROBES: u64 = 5;
    pub const VALIDATION: u64 = 6;
    pub const GRADNORM_PROBE: u64 = 7;
    pub const DRIFT_DIRECTION: u64 = 8;
    pub const TRAINING_STREAM: u64 = 9;
    pub const POLICY_INIT: u64 = 10;
    pub const TASKS: u64 = 1_000;
    pub const FADING: u64 = 2_000;
    pub const ANALOG_NOISE: u64 = 3_000;
    pub const ACTIONS: u64 = 4_000;
}

#[derive(Debug, Clone)]
pub struct SimRng {
    seed: u64,
    stream_id: u64,
    inner: ChaCha8Rng,
}

impl SimRng {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        key[8..16].copy_from_slice(&(!seed).rotate_left(17).to_le_bytes());
        let mut inner = ChaCha8Rng::from_seed(key);
        inner.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            inner,
        }
    }

    /// Stream for the `index`-th instance of a per-agent family.
    pub fn for_agent(seed: u64, family: u64, index: usize) -> Self {
        Self::new(seed, family + index as u64)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn gaussian(&mut self, mean: f64, std: f64) -> f64 {
        mean + std * self.normal()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Uniform integer in `0..n`. `n` must be non-zero.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn normal_vec(&mut self, len: usize) -> Vec<f64> {
        (0..len).map(|_| self.normal()).collect()
    }
}
