//! Counter-keyed random streams: every noise draw is a pure function of
//! `(seed, frame, entity, channel)`, so results do not depend on iteration order
//! or thread scheduling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// What a stream is used for; keeps draws for different purposes independent.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Channel {
    Detection = 1,
    DetectionDrop = 2,
    Feature = 3,
    Line = 4,
    Odometry = 5,
    Ground = 6,
    Score = 7,
    WorldLayout = 8,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic stream for one `(seed, frame, entity, channel)` key.
pub fn stream(seed: u64, frame: u64, entity: u64, channel: Channel) -> NoiseStream {
    let mut k = splitmix(seed);
    k = splitmix(k ^ frame);
    k = splitmix(k ^ entity);
    k = splitmix(k ^ channel as u64);
    NoiseStream(ChaCha8Rng::seed_from_u64(k))
}

pub struct NoiseStream(ChaCha8Rng);

impl NoiseStream {
    /// Zero-mean Gaussian; exactly 0 when `sigma == 0` (the draw is still consumed).
    pub fn gauss(&mut self, sigma: f64) -> f64 {
        let z: f64 = StandardNormal.sample(&mut self.0);
        if sigma == 0.0 {
            0.0
        } else {
            sigma * z
        }
    }

    pub fn uniform(&mut self) -> f64 {
        self.0.random::<f64>()
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }
}
