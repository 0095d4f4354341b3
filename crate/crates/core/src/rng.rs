//! Counter-based random streams.
//!
//! Every random draw in the library comes from a ChaCha stream addressed by
//! `(purpose, index, step)` under a master seed, so results do not depend on
//! how particles are scheduled across threads.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::Real;

pub type ParticleRng = ChaCha20Rng;

/// What a stream is used for. Streams with different purposes never overlap.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Purpose {
    Initial = 1,
    Propagate = 2,
    Resample = 3,
    Simulate = 4,
    Measurement = 5,
    Forecast = 6,
    Auxiliary = 7,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamFactory {
    seed: u64,
}

impl StreamFactory {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self, purpose: Purpose, index: u64, step: u64) -> ParticleRng {
        let mut rng = ChaCha20Rng::seed_from_u64(self.seed);
        rng.set_stream(((purpose as u64) << 56) ^ (index & 0x00ff_ffff_ffff_ffff));
        // 2^40 words per step.
        rng.set_word_pos(u128::from(step) << 40);
        rng
    }
}

/// Standard normal draw converted to the working scalar. Draws are always
/// made in `f64` so that `f32` and `f64` runs consume identical streams.
pub fn standard_normal<T: Real, R: RngCore + ?Sized>(rng: &mut R) -> T {
    let z: f64 = StandardNormal.sample(rng);
    T::lit(z)
}
