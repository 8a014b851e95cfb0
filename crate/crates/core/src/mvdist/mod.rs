//! Multivariate normal and t box probabilities, equicoordinate quantiles, and
//! the conditional t-orthant integral used by the unknown-variance CRP test.

mod qmc;
mod solve;
mod sov;
pub mod univariate;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use qmc::{Estimate as ProbEstimate, LatticeRule, RANDOM_SHIFTS};
pub use solve::{bisect, brent, integrate_gk};
use sov::SovFactor;
use univariate::{chisq_ln_pdf, chisq_quantile, norm_quantile, t_sf};

/// Degrees of freedom of a multivariate t law; `Infinite` is Gaussian.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Df {
    Finite(u32),
    Infinite,
}

impl Df {
    pub fn from_count(nu: usize) -> Result<Self> {
        match u32::try_from(nu) {
            Ok(v) if v > 0 => Ok(Df::Finite(v)),
            _ => Err(Error::contract("degrees of freedom must be a positive integer")),
        }
    }
}

/// Integration accuracy and the seed of the random lattice shifts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QmcOptions {
    pub tol: f64,
    pub seed: u64,
    pub min_points: usize,
    pub max_points: usize,
}

impl Default for QmcOptions {
    fn default() -> Self {
        Self {
            tol: 1e-4,
            seed: 0x0005_eed0_f00d,
            min_points: 256,
            max_points: 1 << 17,
        }
    }
}

impl QmcOptions {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }
}

/// `P(shift + X ≤ bound·1)` with `X ~ N(0, scale·corr)` or the matching
/// multivariate t (`X = Z/√(χ²_ν/ν)`).
#[derive(Debug, Clone, PartialEq)]
pub struct EquiProbQuery {
    pub corr: DMatrix<f64>,
    pub shift: Vec<f64>,
    pub df: Df,
    pub bound: f64,
    pub scale: f64,
}

impl EquiProbQuery {
    pub fn central(corr: DMatrix<f64>, df: Df, bound: f64) -> Self {
        let m = corr.nrows();
        Self {
            corr,
            shift: vec![0.0; m],
            df,
            bound,
            scale: 1.0,
        }
    }
}

pub fn mv_cdf_upper_tail(query: &EquiProbQuery, opts: &QmcOptions) -> Result<ProbEstimate> {
    if !(query.scale > 0.0) || !query.scale.is_finite() {
        return Err(Error::contract("covariance scale must be positive"));
    }
    if query.bound == f64::INFINITY {
        return Ok(exact(0.0));
    }
    let cov = query.corr.scale(query.scale);
    let eq = EquiBox::prepare(&cov, &query.shift, query.df, query.bound, opts)?;
    Ok(eq.upper_tail(query.bound))
}

/// Common bound `b` with `P(all components ≤ b) = level`.
pub fn mv_equicoordinate_quantile(corr: &DMatrix<f64>, df: Df, level: f64, opts: &QmcOptions) -> Result<f64> {
    let m = corr.nrows();
    let reference = univariate_quantile(1.0 - (1.0 - level) / (2.0 * m as f64), df);
    EquiBox::prepare(corr, &vec![0.0; m], df, reference, opts)?.quantile(level)
}

/// Reusable integrator for one covariance, shift and df: the variable
/// ordering and the lattice rule are fixed at preparation time, so repeated
/// evaluations are smooth in the bound and deterministic.
#[derive(Debug, Clone)]
pub struct EquiBox {
    factor: SovFactor,
    shift: Vec<f64>,
    df: Df,
    rule: LatticeRule,
    /// Chi scaling `s` per (shift, point, antithetic side) for finite df.
    chi: Vec<f64>,
    tol: f64,
    max_points: usize,
}

impl EquiBox {
    pub fn prepare(cov: &DMatrix<f64>, shift: &[f64], df: Df, reference_bound: f64, opts: &QmcOptions) -> Result<Self> {
        let m = cov.nrows();
        if cov.ncols() != m || shift.len() != m {
            return Err(Error::contract("covariance must be square and match the shift length"));
        }
        if shift.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("shift must be finite"));
        }
        let rowmajor: Vec<f64> = (0..m).flat_map(|i| (0..m).map(move |j| (i, j))).map(|(i, j)| cov[(i, j)]).collect();
        let reference_bound = if reference_bound.is_finite() { reference_bound } else { 0.0 };
        let reference: Vec<f64> = shift.iter().map(|s| reference_bound - s).collect();
        let cholesky = SovFactor::new(&rowmajor, m, &reference)?;
        let make = |factor: SovFactor| {
            let dim = factor.qmc_dim() + usize::from(matches!(df, Df::Finite(_)));
            let mut eq = Self {
                factor,
                shift: shift.to_vec(),
                df,
                chi: Vec::new(),
                rule: LatticeRule::new(dim, opts.min_points.max(1), opts.seed),
                tol: opts.tol,
                max_points: opts.max_points.max(opts.min_points),
            };
            eq.chi = eq.chi_values(&eq.rule);
            eq
        };
        let mut eq = make(cholesky);
        if eq.factor.rank() > 2 {
            // Keep whichever transform integrates more accurately here.
            let alt = make(SovFactor::principal(&rowmajor, m)?);
            let se = eq.lower_fixed(reference_bound).std_error;
            if alt.lower_fixed(reference_bound).std_error < se {
                eq = alt;
            }
        }
        // Grow the rule until the reference evaluation meets the tolerance.
        while eq.factor.rank() > 1 && eq.rule.points_per_shift() < eq.max_points {
            if eq.lower_with(reference_bound, &eq.rule, &eq.chi).std_error <= eq.tol {
                break;
            }
            eq.rule = eq.rule.doubled();
            eq.chi = eq.chi_values(&eq.rule);
        }
        Ok(eq)
    }

    fn chi_values(&self, rule: &LatticeRule) -> Vec<f64> {
        let Df::Finite(nu) = self.df else { return Vec::new() };
        let nu = nu as f64;
        let mut out = Vec::with_capacity(RANDOM_SHIFTS * rule.points_per_shift() * 2);
        for k in 0..RANDOM_SHIFTS {
            rule.for_each_pair(k, |x, y| {
                for u in [x[0], y[0]] {
                    let u = u.clamp(1e-300, 1.0 - 1e-16);
                    out.push((chisq_quantile(u, nu) / nu).sqrt());
                }
            });
        }
        out
    }

    pub fn dim(&self) -> usize {
        self.shift.len()
    }

    fn lower_with(&self, bound: f64, rule: &LatticeRule, chi: &[f64]) -> ProbEstimate {
        if bound == f64::INFINITY {
            return exact(1.0);
        }
        if bound == f64::NEG_INFINITY {
            return exact(0.0);
        }
        let upper: Vec<f64> = self.shift.iter().map(|s| bound - s).collect();
        let mut y = vec![0.0; self.factor.rank().max(1)];
        if self.factor.rank() == 1 {
            let p = match self.factor.rank_one_interval(&upper) {
                None => 0.0,
                Some((lo, hi)) => (t_sf(lo, self.df) - t_sf(hi, self.df)).max(0.0),
            };
            return exact(p);
        }
        if rule.dim() == 0 {
            return exact(self.factor.integrand(&upper, 1.0, &[], &mut y));
        }
        let off = usize::from(!chi.is_empty());
        let mut means = [0.0; RANDOM_SHIFTS];
        for (k, mean) in means.iter_mut().enumerate() {
            let mut acc = 0.0;
            let mut idx = k * rule.points_per_shift() * 2;
            rule.for_each_pair(k, |x, z| {
                let (sx, sz) = if off == 1 { (chi[idx], chi[idx + 1]) } else { (1.0, 1.0) };
                idx += 2;
                acc += 0.5
                    * (self.factor.integrand(&upper, sx, &x[off..], &mut y)
                        + self.factor.integrand(&upper, sz, &z[off..], &mut y));
            });
            *mean = acc / rule.points_per_shift() as f64;
        }
        qmc::summarize(&means, rule.points_per_shift())
    }

    /// `P(all ≤ bound)` with the prepared rule.
    pub fn lower_fixed(&self, bound: f64) -> ProbEstimate {
        self.lower_with(bound, &self.rule, &self.chi)
    }

    /// `P(all ≤ bound)`, refining a private copy of the rule if the prepared
    /// one misses the tolerance at this bound.
    pub fn lower(&self, bound: f64) -> ProbEstimate {
        let mut est = self.lower_fixed(bound);
        let mut rule = self.rule.clone();
        while est.std_error > self.tol && rule.points_per_shift() < self.max_points {
            rule = rule.doubled();
            let chi = self.chi_values(&rule);
            est = self.lower_with(bound, &rule, &chi);
        }
        est
    }

    pub fn upper_tail(&self, bound: f64) -> ProbEstimate {
        self.upper_tail_within(bound, 0.0)
    }

    /// `P(some > bound)`, refined until its standard error is below the
    /// tolerance or below `rel` times the estimate, whichever is larger.
    pub fn upper_tail_within(&self, bound: f64, rel: f64) -> ProbEstimate {
        let upper = |e: ProbEstimate| ProbEstimate {
            value: (1.0 - e.value).clamp(0.0, 1.0),
            ..e
        };
        let mut est = upper(self.lower_fixed(bound));
        let mut rule = self.rule.clone();
        while est.std_error > self.tol.max(rel * est.value) && rule.points_per_shift() < self.max_points {
            rule = rule.doubled();
            let chi = self.chi_values(&rule);
            est = upper(self.lower_with(bound, &rule, &chi));
        }
        est
    }

    /// Solves `P(all ≤ b) = level` with the prepared rule held fixed.
    pub fn quantile(&self, level: f64) -> Result<f64> {
        if !(level > 0.0 && level < 1.0) {
            return Err(Error::contract("quantile level must lie in (0, 1)"));
        }
        let m = self.dim() as f64;
        let smax = self.factor_scale();
        let lo_shift = self.shift.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi_shift = self.shift.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut lo = lo_shift + smax * univariate_quantile(level, self.df).min(0.0) - 0.5;
        let mut hi = hi_shift + smax * univariate_quantile(1.0 - (1.0 - level) / m, self.df).max(0.0) + 0.5;
        let f = |b: f64| Ok(self.lower_fixed(b).value - level);
        let mut flo = f(lo)?;
        let mut fhi = f(hi)?;
        let mut guard = 0;
        while flo > 0.0 && guard < 60 {
            lo -= 1.0 + (hi - lo);
            flo = f(lo)?;
            guard += 1;
        }
        while fhi < 0.0 && guard < 120 {
            hi += 1.0 + (hi - lo);
            fhi = f(hi)?;
            guard += 1;
        }
        brent(f, (lo, flo), (hi, fhi), 1e-7, 200)
    }

    fn factor_scale(&self) -> f64 {
        // Largest marginal standard deviation, recovered from the univariate
        // quantile scale of the factor rows; 1 for correlation matrices.
        self.factor.max_sd()
    }
}

fn exact(value: f64) -> ProbEstimate {
    ProbEstimate {
        value,
        std_error: 0.0,
        points: 1,
    }
}

/// Quantile of the standard normal or Student t marginal.
pub fn univariate_quantile(p: f64, df: Df) -> f64 {
    match df {
        Df::Infinite => norm_quantile(p),
        Df::Finite(nu) => {
            use statrs::distribution::{ContinuousCDF, StudentsT};
            StudentsT::new(0.0, 1.0, nu as f64).expect("positive df").inverse_cdf(p)
        }
    }
}

/// Options for [`conditional_t_orthant`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrthantOptions {
    /// Absolute tolerance of the outer quadrature.
    pub tol: f64,
    /// Inner box-probability rule.
    pub inner: QmcOptions,
}

impl Default for OrthantOptions {
    fn default() -> Self {
        Self {
            tol: 1e-4,
            inner: QmcOptions {
                tol: 2e-4,
                ..QmcOptions::default()
            },
        }
    }
}

/// Integrator for `1 − P(X ≤ bound·√(W/ν_div + q) − b)`, `X ~ N(0, cov)`,
/// `W ~ χ²_{ν_chisq}`, prepared once so the bound can be varied smoothly.
#[derive(Debug, Clone)]
pub struct ConditionalOrthant {
    inner: EquiBox,
    b: Vec<f64>,
    q: f64,
    nu_chisq: f64,
    nu_div: f64,
    x_range: (f64, f64),
    tol: f64,
}

impl ConditionalOrthant {
    pub fn prepare(
        cov: &DMatrix<f64>,
        b: &[f64],
        q: f64,
        nu_chisq: u32,
        nu_div: u32,
        reference_bound: f64,
        opts: &OrthantOptions,
    ) -> Result<Self> {
        if b.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("conditional shift must be finite"));
        }
        if !(q >= 0.0) || !q.is_finite() {
            return Err(Error::contract("q must be a finite nonnegative number"));
        }
        if nu_chisq == 0 || nu_div == 0 {
            return Err(Error::contract("degrees of freedom must be positive"));
        }
        let (nc, nd) = (nu_chisq as f64, nu_div as f64);
        let s0 = (nc / nd + q).sqrt();
        // The inner integrator sees P(X + b ≤ bound·s): shift b, bound scaled.
        let reference = if reference_bound.is_finite() { reference_bound * s0 } else { 0.0 };
        let inner = EquiBox::prepare(cov, b, Df::Infinite, reference, &opts.inner)?;
        let x_lo = chisq_quantile(1e-11, nc).sqrt();
        let x_hi = chisq_quantile(1.0 - 1e-11, nc).sqrt();
        Ok(Self {
            inner,
            b: b.to_vec(),
            q,
            nu_chisq: nc,
            nu_div: nd,
            x_range: (x_lo, x_hi),
            tol: opts.tol,
        })
    }

    pub fn shift(&self) -> &[f64] {
        &self.b
    }

    /// Upper-orthant complement probability at `bound`.
    pub fn complement(&self, bound: f64) -> Result<f64> {
        if bound == f64::INFINITY {
            return Ok(0.0);
        }
        if bound == f64::NEG_INFINITY {
            return Ok(1.0);
        }
        let (nc, nd, q) = (self.nu_chisq, self.nu_div, self.q);
        let integrand = |x: f64| -> Result<f64> {
            if x <= 0.0 {
                return Ok(0.0);
            }
            let w = x * x;
            let dens = (chisq_ln_pdf(w, nc)).exp() * 2.0 * x;
            if dens == 0.0 {
                return Ok(0.0);
            }
            let s = (w / nd + q).sqrt();
            Ok(dens * self.inner.lower_fixed(bound * s).value)
        };
        let inside = integrate_gk(integrand, self.x_range.0, self.x_range.1, self.tol, 64)?;
        Ok((1.0 - inside).clamp(0.0, 1.0))
    }
}

pub fn conditional_t_orthant(
    cov: &DMatrix<f64>,
    b: &[f64],
    q: f64,
    nu_chisq: u32,
    nu_divisor: u32,
    bound: f64,
    opts: &OrthantOptions,
) -> Result<f64> {
    if bound == f64::INFINITY {
        return Ok(0.0);
    }
    ConditionalOrthant::prepare(cov, b, q, nu_chisq, nu_divisor, bound, opts)?.complement(bound)
}

#[cfg(test)]
mod tests {
    use super::*;
    use univariate::norm_sf;

    fn exch(m: usize, rho: f64) -> DMatrix<f64> {
        DMatrix::from_fn(m, m, |i, j| if i == j { 1.0 } else { rho })
    }

    #[test]
    fn univariate_tail_is_exact() {
        for b in [-4.0, -1.0, 0.0, 1.645, 3.5] {
            let q = EquiProbQuery::central(exch(1, 0.0), Df::Infinite, b);
            let p = mv_cdf_upper_tail(&q, &QmcOptions::default()).unwrap();
            assert!((p.value - norm_sf(b)).abs() < 1e-12);
        }
    }

    #[test]
    fn univariate_t_tail_within_tolerance() {
        for b in [-3.0, 0.5, 2.0] {
            let q = EquiProbQuery::central(exch(1, 0.0), Df::Finite(7), b);
            let p = mv_cdf_upper_tail(&q, &QmcOptions::default()).unwrap();
            assert!((p.value - t_sf(b, Df::Finite(7))).abs() < 1e-6, "{p:?}");
        }
    }

    #[test]
    fn bivariate_orthant_closed_form() {
        // P(X1 ≤ 0, X2 ≤ 0) = 1/4 + asin(ρ)/(2π).
        let rho: f64 = 0.6;
        let q = EquiProbQuery::central(exch(2, rho), Df::Infinite, 0.0);
        let p = mv_cdf_upper_tail(&q, &QmcOptions::default()).unwrap();
        let exact = 1.0 - (0.25 + rho.asin() / (2.0 * std::f64::consts::PI));
        assert!((p.value - exact).abs() < 3e-4, "{p:?} vs {exact}");
    }

    #[test]
    fn independent_components_multiply() {
        let q = EquiProbQuery::central(exch(4, 0.0), Df::Infinite, 1.2);
        let p = mv_cdf_upper_tail(&q, &QmcOptions::default()).unwrap();
        let exact = 1.0 - (1.0 - norm_sf(1.2)).powi(4);
        assert!((p.value - exact).abs() < 3e-4);
    }

    #[test]
    fn scalar_quantiles() {
        let z = mv_equicoordinate_quantile(&exch(1, 0.0), Df::Infinite, 0.95, &QmcOptions::default()).unwrap();
        assert!((z - 1.6448536).abs() < 1e-6);
    }

    #[test]
    fn orthant_with_infinite_bound_is_zero() {
        let p = conditional_t_orthant(&exch(2, 0.5), &[0.0, 0.0], 0.0, 10, 10, f64::INFINITY, &OrthantOptions::default());
        assert_eq!(p.unwrap(), 0.0);
    }

    #[test]
    fn rejects_indefinite_matrix() {
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 1.5, 1.5, 1.0]);
        let q = EquiProbQuery::central(bad, Df::Infinite, 1.0);
        assert!(matches!(mv_cdf_upper_tail(&q, &QmcOptions::default()), Err(Error::NumericalDomain(_))));
    }
}
