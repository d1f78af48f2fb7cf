//! The portable value stream behind every key and every random model.
//!
//! SplitMix64 produces 64-bit words. Uniform reals take the top 53 bits of a
//! word divided by 2^53, so they lie in `[0, 1)`. Standard normals come from
//! Box–Muller on two consecutive uniforms `(u1, u2)`: the cosine branch is
//! returned first and the sine branch is returned by the next call. Integers
//! in `0..n` are `floor(u * n)` for one uniform `u`.

use std::f64::consts::PI;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
    spare_normal: Option<f64>,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 {
            state: seed,
            spare_normal: None,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)`.
    pub fn next_uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    pub fn next_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // 1 - u keeps the log argument in (0, 1].
        let u1 = 1.0 - self.next_uniform();
        let u2 = self.next_uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Uniform integer in `0..n`. `n` must be nonzero.
    pub fn next_below(&mut self, n: usize) -> usize {
        let j = (self.next_uniform() * n as f64) as usize;
        j.min(n - 1)
    }
}

/// The value stream for a seed. Identical seeds give identical streams on
/// every platform.
pub fn derive_rng_stream(seed: u64) -> SplitMix64 {
    SplitMix64::new(seed)
}
