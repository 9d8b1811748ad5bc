//! Random sources for the noise mechanisms.
//!
//! `Secure` draws its key from the operating system and cannot be reseeded.
//! `Seeded` is reproducible and is what tests, previews and simulations use.
//! `NoiseOff` makes every noise draw exactly zero; outside this crate it is
//! only constructible with the `test-modes` feature.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    Secure,
    Seeded,
    NoiseOff,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RngError {
    #[error("secure random source cannot be seeded")]
    SeedingRejected,
}

#[derive(Debug, Clone)]
pub struct RandomSource {
    mode: NoiseMode,
    rng: ChaCha20Rng,
}

impl RandomSource {
    pub fn secure() -> Self {
        RandomSource { mode: NoiseMode::Secure, rng: ChaCha20Rng::from_os_rng() }
    }

    pub fn seeded(seed: u64) -> Self {
        RandomSource { mode: NoiseMode::Seeded, rng: ChaCha20Rng::seed_from_u64(seed) }
    }

    #[cfg(any(test, feature = "test-modes"))]
    pub fn noise_off() -> Self {
        Self::exact()
    }

    /// Zero-noise source for reviewer dry runs and reference values on
    /// public data. Never used to produce anything released to a researcher.
    pub(crate) fn exact() -> Self {
        RandomSource { mode: NoiseMode::NoiseOff, rng: ChaCha20Rng::seed_from_u64(0) }
    }

    pub fn mode(&self) -> NoiseMode {
        self.mode
    }

    pub fn is_noise_off(&self) -> bool {
        self.mode == NoiseMode::NoiseOff
    }

    pub fn reseed(&mut self, seed: u64) -> Result<(), RngError> {
        if self.mode == NoiseMode::Secure {
            return Err(RngError::SeedingRejected);
        }
        self.rng = ChaCha20Rng::seed_from_u64(seed);
        Ok(())
    }

    /// Independent child stream in the same mode. Seeded parents give
    /// deterministic children.
    pub fn fork(&mut self) -> RandomSource {
        let mut key = [0u8; 32];
        self.rng.fill_bytes(&mut key);
        RandomSource { mode: self.mode, rng: ChaCha20Rng::from_seed(key) }
    }

    /// Uniform draw from `[0, 1)`.
    pub(crate) fn unit(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub(crate) fn coin(&mut self) -> bool {
        self.rng.random::<bool>()
    }

    pub(crate) fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub(crate) fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }
}
