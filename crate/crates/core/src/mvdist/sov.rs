//! Genz separation-of-variables transform for box probabilities
//! `P(X ≤ b)`, `X ~ N(0, Σ)`, with `Σ` positive semi-definite.
//!
//! Σ is factored by a pivoted Cholesky decomposition whose ordering follows
//! Genz & Bretz (smallest conditional probability first). Rows that are
//! linearly dependent on earlier pivots become extra constraints on the last
//! pivot they load on, so singular covariances need no regularisation.

use super::univariate::{norm_cdf, norm_pdf, norm_quantile, norm_sf};
use crate::error::{Error, Result};

const RANK_TOL: f64 = 1e-10;
const LOADING_TOL: f64 = 1e-8;
const NEGATIVE_TOL: f64 = 1e-8;
/// Pivots are chosen among rows whose conditional variance is at least this
/// fraction of the largest remaining one. A nearly dependent row taken as a
/// pivot would amplify rounding in every later residual.
const PIVOT_REL: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct SovFactor {
    m: usize,
    rank: usize,
    /// `perm[i]` is the original index of permuted row `i`.
    perm: Vec<usize>,
    /// Permuted rows, `rank` loadings each.
    l: Vec<f64>,
    /// For each pivot column, the permuted rows whose last loading is there.
    constraints: Vec<Vec<usize>>,
    /// Rows with no loading at all: `0 ≤ b_i`.
    null_rows: Vec<usize>,
}

impl SovFactor {
    /// `cov` is row-major `m × m`; `reference_upper` fixes the variable ordering.
    pub fn new(cov: &[f64], m: usize, reference_upper: &[f64]) -> Result<Self> {
        if cov.len() != m * m || reference_upper.len() != m || m == 0 {
            return Err(Error::contract("covariance and limits have inconsistent dimensions"));
        }
        if cov.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalDomain("covariance has non-finite entries".into()));
        }
        for i in 0..m {
            for j in 0..i {
                let (a, b) = (cov[i * m + j], cov[j * m + i]);
                if (a - b).abs() > 1e-10 * (1.0 + a.abs().max(b.abs())) {
                    return Err(Error::NumericalDomain("covariance is not symmetric".into()));
                }
            }
        }
        let max_diag = (0..m).map(|i| cov[i * m + i]).fold(0.0, f64::max);
        if (0..m).any(|i| cov[i * m + i] < -NEGATIVE_TOL * max_diag.max(1.0)) {
            return Err(Error::NumericalDomain("covariance has a negative variance".into()));
        }
        let scale = max_diag.max(f64::MIN_POSITIVE);

        let mut a = cov.to_vec();
        let mut perm: Vec<usize> = (0..m).collect();
        let mut lfull = vec![0.0; m * m];
        let mut y = vec![0.0; m];
        let mut rank = 0;
        for j in 0..m {
            let mut best: Option<(usize, f64)> = None;
            let max_d = (j..m).map(|i| a[i * m + i]).fold(0.0, f64::max);
            for i in j..m {
                let d = a[i * m + i];
                if d <= RANK_TOL * scale || d < PIVOT_REL * max_d {
                    continue;
                }
                let partial: f64 = (0..j).map(|l| lfull[i * m + l] * y[l]).sum();
                let h = (reference_upper[perm[i]] - partial) / d.sqrt();
                let p = if h.is_nan() { 1.0 } else { norm_cdf(h) };
                if best.is_none_or(|(_, bp)| p < bp) {
                    best = Some((i, p));
                }
            }
            let Some((piv, _)) = best else { break };
            swap_sym(&mut a, m, j, piv);
            for l in 0..m {
                lfull.swap(j * m + l, piv * m + l);
            }
            perm.swap(j, piv);

            let d = a[j * m + j].sqrt();
            lfull[j * m + j] = d;
            for i in j + 1..m {
                lfull[i * m + j] = a[i * m + j] / d;
            }
            for i in j + 1..m {
                for k in j + 1..=i {
                    let v = a[i * m + k] - lfull[i * m + j] * lfull[k * m + j];
                    a[i * m + k] = v;
                    a[k * m + i] = v;
                }
            }
            let partial: f64 = (0..j).map(|l| lfull[j * m + l] * y[l]).sum();
            let h = (reference_upper[perm[j]] - partial) / d;
            y[j] = truncated_mean_upper(h);
            rank += 1;
        }
        for i in rank..m {
            if a[i * m + i] < -NEGATIVE_TOL * scale {
                // Cholesky rounding on a nearly singular matrix; the
                // eigendecomposition decides whether it is really indefinite.
                return Self::principal(cov, m);
            }
        }

        let mut l = vec![0.0; m * rank];
        for i in 0..m {
            for j in 0..rank {
                l[i * rank + j] = lfull[i * m + j];
            }
        }
        Ok(Self::from_loadings(m, rank, perm, l, scale))
    }

    /// Principal-component root `X = V Λ^{1/2} Z` with the dominant component
    /// integrated analytically (last) and the others sampled in decreasing
    /// variance order. Robust when some conditional variance is tiny, which
    /// makes the Cholesky integrand nearly discontinuous.
    pub fn principal(cov: &[f64], m: usize) -> Result<Self> {
        let mat = nalgebra::DMatrix::from_row_slice(m, m, cov);
        let eig = mat.symmetric_eigen();
        let max_ev = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
        if eig.eigenvalues.iter().any(|&v| v < -NEGATIVE_TOL * max_ev.max(1.0)) {
            return Err(Error::NumericalDomain("covariance is not positive semi-definite".into()));
        }
        let scale = max_ev.max(f64::MIN_POSITIVE);
        let mut idx: Vec<usize> = (0..m).filter(|&i| eig.eigenvalues[i] > RANK_TOL * scale).collect();
        idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        if let Some(first) = (!idx.is_empty()).then(|| idx.remove(0)) {
            idx.push(first);
        }
        let rank = idx.len();
        let mut l = vec![0.0; m * rank];
        for (col, &e) in idx.iter().enumerate() {
            let sd = eig.eigenvalues[e].sqrt();
            // Fix the sign so the analytic column loads positively on average.
            let sign = if eig.eigenvectors.column(e).sum() < 0.0 { -1.0 } else { 1.0 };
            for i in 0..m {
                l[i * rank + col] = sign * sd * eig.eigenvectors[(i, e)];
            }
        }
        Ok(Self::from_loadings(m, rank, (0..m).collect(), l, scale))
    }

    fn from_loadings(m: usize, rank: usize, perm: Vec<usize>, l: Vec<f64>, scale: f64) -> Self {
        let mut constraints = vec![Vec::new(); rank];
        let mut null_rows = Vec::new();
        let tol = LOADING_TOL * scale.sqrt();
        for i in 0..m {
            match (0..rank).rev().find(|&j| l[i * rank + j].abs() > tol) {
                Some(j) => constraints[j].push(i),
                None => null_rows.push(i),
            }
        }
        Self {
            m,
            rank,
            perm,
            l,
            constraints,
            null_rows,
        }
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    /// Largest marginal standard deviation.
    pub fn max_sd(&self) -> f64 {
        let r = self.rank;
        (0..self.m)
            .map(|i| self.l[i * r..(i + 1) * r].iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    /// For rank one, the box is `lo ≤ Y ≤ hi` for the single standardised
    /// variable `Y` (with `s = 1`); `None` when a null row rules the box out.
    pub fn rank_one_interval(&self, upper: &[f64]) -> Option<(f64, f64)> {
        debug_assert_eq!(self.rank, 1);
        if self.null_rows.iter().any(|&i| upper[self.perm[i]] < 0.0) {
            return None;
        }
        let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
        for &i in &self.constraints[0] {
            let c = self.l[i];
            let lim = upper[self.perm[i]] / c;
            if c > 0.0 {
                hi = hi.min(lim);
            } else {
                lo = lo.max(lim);
            }
        }
        (hi > lo).then_some((lo, hi))
    }

    /// Number of uniform coordinates the integrand consumes.
    pub fn qmc_dim(&self) -> usize {
        self.rank.saturating_sub(1)
    }

    /// Integrand value at `w ∈ [0,1]^{rank−1}` for the box `X ≤ s·upper`.
    pub fn integrand(&self, upper: &[f64], s: f64, w: &[f64], y: &mut [f64]) -> f64 {
        for &i in &self.null_rows {
            if s * upper[self.perm[i]] < 0.0 {
                return 0.0;
            }
        }
        let r = self.rank;
        let mut prob = 1.0;
        for j in 0..r {
            let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
            for &i in &self.constraints[j] {
                let row = &self.l[i * r..i * r + j + 1];
                let mut rhs = s * upper[self.perm[i]];
                for l in 0..j {
                    rhs -= row[l] * y[l];
                }
                let c = row[j];
                let lim = rhs / c;
                if c > 0.0 {
                    hi = hi.min(lim);
                } else {
                    lo = lo.max(lim);
                }
            }
            if !(hi > lo) {
                return 0.0;
            }
            let (plo, e) = interval_mass(lo, hi);
            prob *= e;
            if prob <= 0.0 {
                return 0.0;
            }
            if j + 1 < r {
                let u = (plo + w[j] * e).clamp(1e-300, 1.0 - 1e-16);
                y[j] = norm_quantile(u);
            }
        }
        prob
    }
}

/// `(Φ(lo), Φ(hi) − Φ(lo))`, computed on the accurate side of zero.
fn interval_mass(lo: f64, hi: f64) -> (f64, f64) {
    if lo > 0.0 {
        let (slo, shi) = (norm_sf(lo), norm_sf(hi));
        (1.0 - slo, slo - shi)
    } else {
        let (plo, phi) = (norm_cdf(lo), norm_cdf(hi));
        (plo, phi - plo)
    }
}

fn truncated_mean_upper(h: f64) -> f64 {
    if h == f64::INFINITY || h.is_nan() {
        return 0.0;
    }
    let p = norm_cdf(h);
    if p < 1e-300 {
        return h;
    }
    -norm_pdf(h) / p
}

fn swap_sym(a: &mut [f64], m: usize, i: usize, j: usize) {
    if i == j {
        return;
    }
    for k in 0..m {
        a.swap(i * m + k, j * m + k);
    }
    for k in 0..m {
        a.swap(k * m + i, k * m + j);
    }
}
