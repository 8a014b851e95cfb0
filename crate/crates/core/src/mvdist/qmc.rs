//! Randomised rank-1 lattice rules (Richtmyer generators) with the baker's
//! transform and antithetic pairs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const RANDOM_SHIFTS: usize = 8;

const PRIMES: [u32; 64] = [
    2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89, 97, 101, 103, 107, 109,
    113, 127, 131, 137, 139, 149, 151, 157, 163, 167, 173, 179, 181, 191, 193, 197, 199, 211, 223, 227, 229, 233, 239,
    241, 251, 257, 263, 269, 271, 277, 281, 283, 293, 307, 311,
];

pub const MAX_DIM: usize = PRIMES.len();

/// Mean and standard error over the random shifts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub std_error: f64,
    pub points: usize,
}

/// A fixed, fully determined point set: `n` lattice points per shift.
#[derive(Debug, Clone)]
pub struct LatticeRule {
    dim: usize,
    n: usize,
    generator: Vec<f64>,
    shifts: Vec<Vec<f64>>,
}

impl LatticeRule {
    pub fn new(dim: usize, n: usize, seed: u64) -> Self {
        assert!(dim <= MAX_DIM, "lattice dimension {dim} exceeds {MAX_DIM}");
        let generator = PRIMES[..dim].iter().map(|&p| (p as f64).sqrt().fract()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shifts = (0..RANDOM_SHIFTS)
            .map(|_| {
                let full: Vec<f64> = (0..MAX_DIM).map(|_| rng.random::<f64>()).collect();
                full[..dim].to_vec()
            })
            .collect();
        Self {
            dim,
            n,
            generator,
            shifts,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn points_per_shift(&self) -> usize {
        self.n
    }

    pub fn doubled(&self) -> Self {
        Self {
            n: self.n * 2,
            ..self.clone()
        }
    }

    /// Visits every point of shift `k` as the antithetic pair `(x, 1 − x)`.
    pub fn for_each_pair(&self, k: usize, mut f: impl FnMut(&[f64], &[f64])) {
        let mut x = vec![0.0; self.dim];
        let mut y = vec![0.0; self.dim];
        let shift = &self.shifts[k];
        for i in 1..=self.n {
            for j in 0..self.dim {
                let u = (i as f64 * self.generator[j] + shift[j]).fract();
                let t = (2.0 * u - 1.0).abs();
                x[j] = t;
                y[j] = 1.0 - t;
            }
            f(&x, &y);
        }
    }

    /// Integrates `f` over the unit cube.
    pub fn integrate(&self, mut f: impl FnMut(&[f64]) -> f64) -> Estimate {
        let mut means = [0.0; RANDOM_SHIFTS];
        for (k, m) in means.iter_mut().enumerate() {
            let mut acc = 0.0;
            self.for_each_pair(k, |x, y| acc += 0.5 * (f(x) + f(y)));
            *m = acc / self.n as f64;
        }
        summarize(&means, self.n)
    }
}

pub(crate) fn summarize(means: &[f64; RANDOM_SHIFTS], n: usize) -> Estimate {
    let k = RANDOM_SHIFTS as f64;
    let value = means.iter().sum::<f64>() / k;
    let var = means.iter().map(|m| (m - value) * (m - value)).sum::<f64>() / (k * (k - 1.0));
    Estimate {
        value,
        std_error: var.sqrt(),
        points: n * RANDOM_SHIFTS * 2,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integrates_smooth_product() {
        let rule = LatticeRule::new(4, 4096, 7);
        let est = rule.integrate(|x| x.iter().map(|v| 3.0 * v * v).product());
        assert!((est.value - 1.0).abs() < 5e-3, "{est:?}");
        assert!(est.std_error < 5e-3);
    }

    #[test]
    fn same_seed_same_points() {
        let a = LatticeRule::new(3, 64, 11).integrate(|x| x[0] * x[1] + x[2]);
        let b = LatticeRule::new(3, 64, 11).integrate(|x| x[0] * x[1] + x[2]);
        assert_eq!(a, b);
    }
}
