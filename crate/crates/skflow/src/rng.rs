//! Seeded pseudo-random generator owned by the tensor core.
//!
//! Algorithm: xorshift64* (Vigna 2016) with a splitmix64 seed scrambler so
//! that nearby seeds give unrelated streams. All weight initializers and the
//! synthetic data generators draw from this generator, which makes every run
//! reproducible from a single u64 seed.

#[derive(Debug, Clone)]
pub struct SkRng {
    state: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl SkRng {
    pub fn new(seed: u64) -> Self {
        // xorshift state must be nonzero
        let mut state = splitmix64(seed);
        if state == 0 {
            state = 0x4d59_5df4_d0f3_3173;
        }
        SkRng { state }
    }

    /// Derive an independent stream, e.g. one per sample index.
    pub fn fork(&self, stream: u64) -> Self {
        SkRng::new(self.state ^ splitmix64(stream.wrapping_add(0xa076_1d64_78bd_642f)))
    }

    pub fn next_u64(&mut self) -> u64 {
        let mut x = self.state;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        self.state = x;
        x.wrapping_mul(0x2545_f491_4f6c_dd1d)
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn uniform_usize(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = (1.0 - self.uniform()).max(f64::MIN_POSITIVE);
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// He-style fan-in scaled uniform: U(-b, b) with b = sqrt(6 / fan_in).
    /// Fan-in uniform with variance 2/fan_in, for weights feeding a
    /// half-rectifying activation.
    pub fn he_uniform(&mut self, fan_in: usize) -> f64 {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        self.uniform_in(-bound, bound)
    }

    /// Fan-in uniform with variance 1/fan_in, for linear outputs and gated
    /// units where the He gain would double the variance per layer.
    pub fn unit_uniform(&mut self, fan_in: usize) -> f64 {
        let bound = (3.0 / fan_in.max(1) as f64).sqrt();
        self.uniform_in(-bound, bound)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_streams() {
        let mut a = SkRng::new(42);
        let mut b = SkRng::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn seeds_diverge() {
        let mut a = SkRng::new(1);
        let mut b = SkRng::new(2);
        assert_ne!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn uniform_in_range() {
        let mut r = SkRng::new(7);
        for _ in 0..1000 {
            let x = r.uniform();
            assert!((0.0..1.0).contains(&x));
        }
    }

    #[test]
    fn normal_moments_roughly_standard() {
        let mut r = SkRng::new(3);
        let n = 20_000;
        let xs: Vec<f64> = (0..n).map(|_| r.normal()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.03, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }
}
