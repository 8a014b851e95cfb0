//! Optimal contrasts and the correlation of contrast statistics.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::model::DoseResponseModel;

/// Contrast maximising the noncentrality of `Σ c_i Ȳ_i` under means `mu0`:
/// `c_i ∝ n_i (μ0_i − μ̄)`, unit Euclidean norm, `Σ c_i μ0_i > 0`.
pub fn optimal_contrast(mu0: &[f64], n: &[usize]) -> Result<Vec<f64>> {
    if mu0.len() != n.len() || mu0.len() < 2 {
        return Err(Error::contract("model means and group sizes must have equal length >= 2"));
    }
    if n.iter().any(|&v| v == 0) || mu0.iter().any(|v| !v.is_finite()) {
        return Err(Error::contract("group sizes must be positive and means finite"));
    }
    let total: f64 = n.iter().map(|&v| v as f64).sum();
    let mbar = mu0.iter().zip(n).map(|(m, &w)| m * w as f64).sum::<f64>() / total;
    let raw: Vec<f64> = mu0.iter().zip(n).map(|(m, &w)| w as f64 * (m - mbar)).collect();
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    let scale = mu0.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-300) * total;
    if norm <= 1e-12 * scale {
        return Err(Error::DegenerateContrast);
    }
    Ok(raw.into_iter().map(|v| v / norm).collect())
}

/// Un-normalised covariance `Σ_i c_mi c_m'i / n_i` of the contrast numerators
/// (in units of σ²).
pub fn contrast_covariance(coeffs: &[Vec<f64>], n: &[usize]) -> Result<DMatrix<f64>> {
    let m = coeffs.len();
    if m == 0 {
        return Err(Error::contract("at least one contrast is required"));
    }
    if coeffs.iter().any(|c| c.len() != n.len()) {
        return Err(Error::contract("contrast length must equal the number of doses"));
    }
    Ok(DMatrix::from_fn(m, m, |a, b| {
        coeffs[a].iter().zip(&coeffs[b]).zip(n).map(|((x, y), &w)| x * y / w as f64).sum()
    }))
}

/// Correlation of the contrast statistics; exact unit diagonal.
pub fn correlation_matrix(coeffs: &[Vec<f64>], n: &[usize]) -> Result<DMatrix<f64>> {
    let cov = contrast_covariance(coeffs, n)?;
    let m = cov.nrows();
    if (0..m).any(|i| !(cov[(i, i)] > 0.0)) {
        return Err(Error::contract("every contrast row must be nonzero"));
    }
    Ok(DMatrix::from_fn(m, m, |a, b| {
        if a == b {
            1.0
        } else {
            (cov[(a, b)] / (cov[(a, a)] * cov[(b, b)]).sqrt()).clamp(-1.0, 1.0)
        }
    }))
}

/// M contrasts over k doses with their correlation matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastSet {
    coeffs: Vec<Vec<f64>>,
    doses: Vec<f64>,
    n: Vec<usize>,
    corr: DMatrix<f64>,
}

impl ContrastSet {
    pub fn new(coeffs: Vec<Vec<f64>>, doses: Vec<f64>, n: Vec<usize>) -> Result<Self> {
        if doses.len() != n.len() {
            return Err(Error::contract("doses and group sizes must have equal length"));
        }
        for c in &coeffs {
            let s: f64 = c.iter().sum();
            let norm: f64 = c.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 || s.abs() > 1e-8 * norm {
                return Err(Error::contract("contrasts must be nonzero and sum to zero"));
            }
        }
        let corr = correlation_matrix(&coeffs, &n)?;
        Ok(Self { coeffs, doses, n, corr })
    }

    /// Optimal contrasts of the given models at `doses` with allocation `n`.
    pub fn from_models(models: &[DoseResponseModel], doses: &[f64], n: &[usize]) -> Result<Self> {
        let coeffs = models
            .iter()
            .map(|m| optimal_contrast(&m.evaluate_at(doses), n))
            .collect::<Result<Vec<_>>>()?;
        Self::new(coeffs, doses.to_vec(), n.to_vec())
    }

    pub fn coeffs(&self) -> &[Vec<f64>] {
        &self.coeffs
    }

    pub fn doses(&self) -> &[f64] {
        &self.doses
    }

    pub fn n(&self) -> &[usize] {
        &self.n
    }

    pub fn corr(&self) -> &DMatrix<f64> {
        &self.corr
    }

    pub fn m(&self) -> usize {
        self.coeffs.len()
    }

    pub fn k(&self) -> usize {
        self.doses.len()
    }

    /// `Σ_i c_mi² / n_i` for each contrast.
    pub fn variance_factors(&self) -> Vec<f64> {
        self.coeffs
            .iter()
            .map(|c| c.iter().zip(&self.n).map(|(v, &w)| v * v / w as f64).sum())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::catalog;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn stage_one() -> ContrastSet {
        ContrastSet::from_models(&catalog::candidates(), &catalog::DOSES, &[24; 5]).unwrap()
    }

    #[test]
    fn emax_candidate_contrast() {
        let c = optimal_contrast(&catalog::emax().evaluate_at(&catalog::DOSES), &[24; 5]).unwrap();
        for (a, b) in c.iter().zip([-0.64, -0.36, 0.06, 0.41, 0.53]) {
            assert!((a - b).abs() < 0.005, "{c:?}");
        }
    }

    #[test]
    fn two_dose_contrast_is_unique() {
        let c = optimal_contrast(&[0.3, 0.9], &[7, 7]).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((c[0] + h).abs() < 1e-15 && (c[1] - h).abs() < 1e-15);
    }

    #[test]
    fn linear_log_at_adapted_doses() {
        let c = optimal_contrast(&catalog::linear_log().evaluate_at(&[0.0, 0.2, 0.6]), &[40; 3]).unwrap();
        for (a, b) in c.iter().zip([-0.707, 0.0, 0.707]) {
            assert!((a - b).abs() < 5e-4, "{c:?}");
        }
    }

    #[test]
    fn constant_means_are_degenerate() {
        assert_eq!(optimal_contrast(&[1.0, 1.0, 1.0], &[2, 3, 4]), Err(Error::DegenerateContrast));
    }

    #[test]
    fn stage_one_correlation_entries() {
        let r = stage_one().corr().clone();
        assert!((r[(0, 1)] - 0.977).abs() < 5e-4);
        assert!((r[(2, 3)] - 0.602).abs() < 5e-4);
        for i in 0..5 {
            assert_eq!(r[(i, i)], 1.0);
        }
        let two = correlation_matrix(&stage_one().coeffs()[..2], &[24; 5]).unwrap();
        assert!((two[(0, 1)] - 0.977).abs() < 5e-4);
        assert_eq!(correlation_matrix(&[vec![-1.0, 1.0]], &[3, 3]).unwrap()[(0, 0)], 1.0);
    }

    /// Sample correlation of simulated contrast statistics under the null.
    #[test]
    fn correlation_matches_simulation() {
        let set = ContrastSet::from_models(&catalog::candidates(), &catalog::DOSES, &[10, 20, 15, 30, 25]).unwrap();
        let m = set.m();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let draws = 1_000_000;
        let mut sum = vec![0.0; m];
        let mut cross = vec![vec![0.0; m]; m];
        for _ in 0..draws {
            let ybar: Vec<f64> = set
                .n()
                .iter()
                .map(|&w| { let z: f64 = StandardNormal.sample(&mut rng); z / (w as f64).sqrt() })
                .collect();
            let t: Vec<f64> = set.coeffs().iter().map(|c| c.iter().zip(&ybar).map(|(a, b)| a * b).sum()).collect();
            for a in 0..m {
                sum[a] += t[a];
                for b in 0..m {
                    cross[a][b] += t[a] * t[b];
                }
            }
        }
        let nd = draws as f64;
        for a in 0..m {
            for b in 0..m {
                let cov = cross[a][b] / nd - sum[a] * sum[b] / (nd * nd);
                let va = cross[a][a] / nd - sum[a] * sum[a] / (nd * nd);
                let vb = cross[b][b] / nd - sum[b] * sum[b] / (nd * nd);
                let rho = cov / (va * vb).sqrt();
                assert!((rho - set.corr()[(a, b)]).abs() < 0.005, "({a},{b}) {rho}");
            }
        }
    }

    fn noncentrality(c: &[f64], mu: &[f64], n: &[usize]) -> f64 {
        let num: f64 = c.iter().zip(mu).map(|(a, b)| a * b).sum();
        let den: f64 = c.iter().zip(n).map(|(a, &w)| a * a / w as f64).sum::<f64>().sqrt();
        num / den
    }

    proptest! {
        #[test]
        fn affine_invariance(mu in prop::collection::vec(-3.0f64..3.0, 3..7), a in -5.0f64..5.0, b in 0.1f64..4.0) {
            let n = vec![12; mu.len()];
            if let Ok(c) = optimal_contrast(&mu, &n) {
                let mapped: Vec<f64> = mu.iter().map(|v| a + b * v).collect();
                let c2 = optimal_contrast(&mapped, &n).unwrap();
                for (x, y) in c.iter().zip(&c2) {
                    prop_assert!((x - y).abs() < 1e-12);
                }
                let flipped: Vec<f64> = mu.iter().map(|v| a - b * v).collect();
                let c3 = optimal_contrast(&flipped, &n).unwrap();
                for (x, y) in c.iter().zip(&c3) {
                    prop_assert!((x + y).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn rows_are_unit_zero_sum(mu in prop::collection::vec(-3.0f64..3.0, 2..8), n0 in 1usize..40) {
            let n: Vec<usize> = (0..mu.len()).map(|i| n0 + i).collect();
            if let Ok(c) = optimal_contrast(&mu, &n) {
                prop_assert!(c.iter().sum::<f64>().abs() < 1e-10);
                prop_assert!((c.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-10);
                prop_assert!(c.iter().zip(&mu).map(|(a, b)| a * b).sum::<f64>() > 0.0);
            }
        }

        #[test]
        fn perturbations_lower_noncentrality(
            mu in prop::collection::vec(-3.0f64..3.0, 3..7),
            eps in prop::collection::vec(-0.3f64..0.3, 7),
        ) {
            let n: Vec<usize> = (0..mu.len()).map(|i| 8 + 3 * i).collect();
            if let Ok(c) = optimal_contrast(&mu, &n) {
                let mut p: Vec<f64> = c.iter().zip(&eps).map(|(a, b)| a + b).collect();
                let mean = p.iter().sum::<f64>() / p.len() as f64;
                p.iter_mut().for_each(|v| *v -= mean);
                let best = noncentrality(&c, &mu, &n);
                prop_assert!(noncentrality(&p, &mu, &n) <= best + 1e-9);
            }
        }
    }
}
