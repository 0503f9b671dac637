//! Seeded random state used for parameter init, quantization noise, and
//! synthetic data. ChaCha8 keeps the stream identical across platforms, and
//! its word position makes the state checkpointable mid-run.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const RNG_ALGORITHM: &str = "chacha8";

pub struct RngState {
    seed: u64,
    rng: ChaCha8Rng,
}

impl RngState {
    pub fn new(seed: u64) -> RngState {
        RngState {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Stream position, for exact save/restore.
    pub fn word_pos(&self) -> u128 {
        self.rng.get_word_pos()
    }

    pub fn restore(seed: u64, word_pos: u128) -> RngState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_word_pos(word_pos);
        RngState { seed, rng }
    }

    /// Uniform draw from `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        self.rng.gen_range(0..n)
    }

    /// Quantization noise: one `U(-1/2, 1/2)` draw per element.
    pub fn noise_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.uniform() - 0.5).collect()
    }
}
