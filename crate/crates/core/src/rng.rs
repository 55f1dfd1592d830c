//! Counter-keyed standard-normal streams.
//!
//! Stream `(seed, index)` is a ChaCha8 generator whose key is expanded from
//! `seed` (`SeedableRng::seed_from_u64`) and whose 64-bit stream id is
//! `index`. Normals come from the basic Box–Muller transform: two uniforms
//! `u1 ∈ (0, 1]`, `u2 ∈ [0, 1)` (53-bit, from one `u64` each) give
//! `sqrt(-2 ln u1)·cos(2π u2)` followed by `sqrt(-2 ln u1)·sin(2π u2)`.
//! A draw therefore depends only on the seed, the stream index and its
//! position in the stream, never on how streams are spread over workers.

use std::f64::consts::TAU;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

const INV_2_53: f64 = 1.0 / (1u64 << 53) as f64;

pub struct NormalStream {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl NormalStream {
    pub fn new(seed: u64, index: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index);
        NormalStream { rng, spare: None }
    }

    fn uniform_open_low(&mut self) -> f64 {
        ((self.rng.next_u64() >> 11) + 1) as f64 * INV_2_53
    }

    fn uniform_closed_low(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * INV_2_53
    }

    pub fn next_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = self.uniform_open_low();
        let u2 = self.uniform_closed_low();
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (TAU * u2).sin_cos();
        self.spare = Some(r * s);
        r * c
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for z in out {
            *z = self.next_normal();
        }
    }
}
