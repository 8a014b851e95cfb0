//! Per-stage sufficient statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Group sizes, group means and the pooled within-group sum of squares of one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    doses: Vec<f64>,
    n: Vec<usize>,
    means: Vec<f64>,
    ss_within: f64,
}

impl StageSummary {
    pub fn new(doses: Vec<f64>, n: Vec<usize>, means: Vec<f64>, ss_within: f64) -> Result<Self> {
        let k = doses.len();
        if k < 2 {
            return Err(Error::contract("a stage needs placebo and at least one active dose"));
        }
        if n.len() != k || means.len() != k {
            return Err(Error::contract("doses, group sizes and means must have equal length"));
        }
        if doses[0] != 0.0 {
            return Err(Error::contract("the first dose must be placebo (0)"));
        }
        if doses.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::contract("doses must be strictly increasing"));
        }
        if n.iter().any(|&v| v == 0) {
            return Err(Error::contract("group sizes must be positive"));
        }
        if means.iter().any(|v| !v.is_finite()) || !(ss_within >= 0.0) || !ss_within.is_finite() {
            return Err(Error::contract("means and sum of squares must be finite, ss >= 0"));
        }
        Ok(Self { doses, n, means, ss_within })
    }

    /// Builds the summary from raw responses, one slice per dose group.
    pub fn from_groups(doses: Vec<f64>, groups: &[Vec<f64>]) -> Result<Self> {
        if groups.len() != doses.len() {
            return Err(Error::contract("one response group per dose is required"));
        }
        let mut n = Vec::with_capacity(groups.len());
        let mut means = Vec::with_capacity(groups.len());
        let mut ss = 0.0;
        for g in groups {
            if g.is_empty() {
                return Err(Error::contract("empty dose group"));
            }
            let mean = g.iter().sum::<f64>() / g.len() as f64;
            ss += g.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>();
            n.push(g.len());
            means.push(mean);
        }
        Self::new(doses, n, means, ss)
    }

    /// Summary with a pooled standard deviation instead of the raw sum of squares.
    pub fn with_sd(doses: Vec<f64>, n: Vec<usize>, means: Vec<f64>, sd: f64) -> Result<Self> {
        let df = n.iter().sum::<usize>() as f64 - doses.len() as f64;
        Self::new(doses, n, means, sd * sd * df.max(0.0))
    }

    pub fn doses(&self) -> &[f64] {
        &self.doses
    }

    pub fn n(&self) -> &[usize] {
        &self.n
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn ss_within(&self) -> f64 {
        self.ss_within
    }

    pub fn k(&self) -> usize {
        self.doses.len()
    }

    pub fn total(&self) -> usize {
        self.n.iter().sum()
    }

    /// Residual degrees of freedom `Σn_i − k`.
    pub fn df(&self) -> usize {
        self.total().saturating_sub(self.k())
    }

    pub fn pooled_variance(&self) -> Result<f64> {
        let df = self.df();
        if df == 0 {
            return Err(Error::contract("no residual degrees of freedom"));
        }
        let s2 = self.ss_within / df as f64;
        if s2 <= 0.0 {
            return Err(Error::DegenerateVariance);
        }
        Ok(s2)
    }

    pub fn weights(&self) -> Vec<f64> {
        self.n.iter().map(|&v| v as f64).collect()
    }

    pub fn index_of(&self, dose: f64) -> Option<usize> {
        self.doses.iter().position(|&d| d == dose)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_from_groups() {
        let s = StageSummary::from_groups(vec![0.0, 1.0], &[vec![1.0, 3.0], vec![2.0, 2.0, 5.0]]).unwrap();
        assert_eq!(s.means(), &[2.0, 3.0]);
        assert_eq!(s.ss_within(), 2.0 + 6.0);
        assert_eq!(s.df(), 3);
        assert!((s.pooled_variance().unwrap() - 8.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_designs() {
        assert!(StageSummary::new(vec![0.1, 1.0], vec![2, 2], vec![0.0, 0.0], 1.0).is_err());
        assert!(StageSummary::new(vec![0.0, 0.0], vec![2, 2], vec![0.0, 0.0], 1.0).is_err());
        assert!(StageSummary::new(vec![0.0, 1.0], vec![2, 0], vec![0.0, 0.0], 1.0).is_err());
        let flat = StageSummary::new(vec![0.0, 1.0], vec![2, 2], vec![1.0, 1.0], 0.0).unwrap();
        assert_eq!(flat.pooled_variance(), Err(Error::DegenerateVariance));
    }
}
