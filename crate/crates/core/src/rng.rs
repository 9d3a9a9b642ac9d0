//! Seeded, platform-independent Gaussian noise.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::grid::Grid2D;
use crate::scalar::Scalar;

/// ChaCha8 stream (a counter-mode generator) with Box–Muller normals.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    stream: ChaCha8Rng,
    spare: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            stream: ChaCha8Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.stream.next_u64()
    }

    /// Uniform on `(0, 1]`; never returns zero so `ln` is always defined.
    pub fn next_open01(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        // 53-bit float draw keeps this identical across platforms
        ((self.next_open01() * n as f64).ceil() as usize).clamp(1, n) - 1
    }

    pub fn next_gaussian(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = self.next_open01();
        let u2 = self.next_open01();
        let r = (-2.0 * u1.ln()).sqrt();
        let phi = std::f64::consts::TAU * u2;
        self.spare = Some(r * phi.sin());
        r * phi.cos()
    }
}

/// Grid of i.i.d. standard normal samples.
pub fn sample_gaussian<T: Scalar>(rng: &mut Rng, width: usize, height: usize) -> Grid2D<T> {
    Grid2D::from_fn(width, height, |_, _| T::lit(rng.next_gaussian()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_grid() {
        let a: Grid2D<f64> = sample_gaussian(&mut Rng::new(42), 16, 16);
        let b: Grid2D<f64> = sample_gaussian(&mut Rng::new(42), 16, 16);
        assert_eq!(a, b);
        let c: Grid2D<f64> = sample_gaussian(&mut Rng::new(43), 16, 16);
        assert_ne!(a, c);
    }

    #[test]
    fn moments_of_a_million_draws() {
        let g: Grid2D<f64> = sample_gaussian(&mut Rng::new(42), 1000, 1000);
        let n = g.len() as f64;
        let mean = g.sum() / n;
        let var = g.values().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.01, "var {var}");
    }

    #[test]
    fn below_stays_in_range() {
        let mut rng = Rng::new(7);
        let mut seen = [false; 5];
        for _ in 0..1000 {
            seen[rng.below(5)] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }
}
