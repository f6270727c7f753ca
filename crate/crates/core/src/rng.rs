//! Per-trajectory Wiener increments.
//!
//! Every trajectory owns a ChaCha8 stream keyed by the ensemble seed and
//! selected by the trajectory index. ChaCha is counter based, so trajectory
//! `k` sees the same increments whatever order or thread it runs on.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone)]
pub struct NoiseStream {
    rng: ChaCha8Rng,
    sqrt_dt: f64,
}

impl NoiseStream {
    pub fn new(seed: u64, index: u64, dt: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index);
        Self {
            rng,
            sqrt_dt: dt.sqrt(),
        }
    }

    /// Next increment `dW ~ N(0, dt)`.
    #[inline]
    pub fn next_increment(&mut self) -> f64 {
        let z: f64 = self.rng.sample(StandardNormal);
        self.sqrt_dt * z
    }

    /// A uniform draw in `[0, 1)` from the same stream.
    pub fn next_uniform(&mut self) -> f64 {
        self.rng.random()
    }
}
