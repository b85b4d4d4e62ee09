//! Seed-stable random number generation.
//!
//! The generator is xoshiro256** seeded through splitmix64, both implemented
//! here so the stream is fully specified by this crate and identical across
//! platforms and releases. Every stochastic component of the library (tensor
//! fills, dataset generation, parameter init, batch sampling) draws from
//! [`SeededRng`], which is what makes whole runs bitwise reproducible.

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// xoshiro256** generator with a remembered seed so child streams can be
/// derived as pure functions of (seed, tag).
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    s: [u64; 4],
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        let mut sm = seed;
        let s = [
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
        ];
        SeededRng { seed, s }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream identified by `tag`. Does not consume from
    /// (or depend on) this generator's draw position.
    pub fn derive(&self, tag: u64) -> SeededRng {
        let mut sm = self.seed ^ 0xa076_1d64_78bd_642f;
        let base = splitmix64(&mut sm);
        SeededRng::new(base ^ tag.wrapping_mul(0xe703_7ed1_a0b4_28db))
    }

    pub fn next_u64(&mut self) -> u64 {
        let result = self.s[1]
            .wrapping_mul(5)
            .rotate_left(7)
            .wrapping_mul(9);
        let t = self.s[1] << 17;
        self.s[2] ^= self.s[0];
        self.s[3] ^= self.s[1];
        self.s[1] ^= self.s[2];
        self.s[0] ^= self.s[3];
        self.s[2] ^= t;
        self.s[3] = self.s[3].rotate_left(45);
        result
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Standard normal via Box-Muller (two fresh uniforms per call).
    pub fn normal(&mut self) -> f64 {
        let u1 = (self.next_f64()).max(f64::MIN_POSITIVE);
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Uniform index in [0, n). Uses the widening-multiply trick.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }
}
