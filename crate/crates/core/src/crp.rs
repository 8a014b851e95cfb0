//! Adaptive multiple contrast test under the conditional rejection
//! probability principle.
//!
//! The base test repeats the stage-1 design in stage 2. Its conditional
//! rejection probability `A` given the stage-1 data is carried over to the
//! adapted stage-2 design by solving for the critical value of the combined
//! maximum statistic that has the same conditional rejection probability.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::adapt::AdaptationOutcome;
use crate::contrast::ContrastSet;
use crate::data::StageSummary;
use crate::error::{Error, Result};
use crate::mvdist::{
    bisect, brent, mv_equicoordinate_quantile, ConditionalOrthant, Df, EquiBox, OrthantOptions, QmcOptions,
};

/// Tolerance on the adaptive critical value in the known-variance case.
const U_TOL: f64 = 1e-6;
/// Bracket width at which the unknown-variance bisection stops.
const C_TOL: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrpOptions {
    pub qmc: QmcOptions,
    pub orthant: OrthantOptions,
}

impl Default for CrpOptions {
    fn default() -> Self {
        Self {
            qmc: QmcOptions {
                tol: 2e-5,
                ..QmcOptions::default()
            },
            orthant: OrthantOptions::default(),
        }
    }
}

/// Conditional law of the combined statistics and its critical value.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedLaw {
    /// Conditional covariance, not normalised to unit diagonal.
    pub corr: DMatrix<f64>,
    pub shift: Vec<f64>,
    pub critical: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrpState {
    /// `u*` (known σ) or `c*` (unknown σ).
    pub base_critical: f64,
    /// Conditional mean of the base-test statistics (`b*`).
    pub base_shift: Vec<f64>,
    /// Conditional error `A`.
    pub conditional_error: f64,
    /// Absent when the trial stopped for futility.
    pub adapted: Option<AdaptedLaw>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AmctResult {
    pub state: CrpState,
    /// Combined `Z_m` or `T_m`; empty after a futility stop.
    pub stats: Vec<f64>,
    pub reject: bool,
}

/// The stage-1 part of the test: contrasts and the base critical value, which
/// depend only on the design and can be shared across datasets.
#[derive(Debug, Clone)]
pub struct CrpBase {
    contrasts: ContrastSet,
    alpha: f64,
    critical: f64,
    df: Df,
}

impl CrpBase {
    /// Known variance: `u*`, the Gaussian equicoordinate quantile of `R*`.
    pub fn known(contrasts: ContrastSet, alpha: f64, opts: &CrpOptions) -> Result<Self> {
        check_alpha(alpha)?;
        let critical = mv_equicoordinate_quantile(contrasts.corr(), Df::Infinite, 1.0 - alpha, &opts.qmc)?;
        Ok(Self {
            contrasts,
            alpha,
            critical,
            df: Df::Infinite,
        })
    }

    /// Unknown variance: `c*`, the t quantile with `2ν₁` degrees of freedom.
    pub fn unknown(contrasts: ContrastSet, nu1: usize, alpha: f64, opts: &CrpOptions) -> Result<Self> {
        check_alpha(alpha)?;
        let df = Df::from_count(2 * nu1)?;
        let critical = mv_equicoordinate_quantile(contrasts.corr(), df, 1.0 - alpha, &opts.qmc)?;
        Ok(Self {
            contrasts,
            alpha,
            critical,
            df,
        })
    }

    pub fn critical(&self) -> f64 {
        self.critical
    }

    pub fn contrasts(&self) -> &ContrastSet {
        &self.contrasts
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::contract("alpha must lie in (0, 1)"));
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Stage-1 contrast numerators `Σ c_mi1 ȳ_i1`.
fn stage_one_numerators(stage1: &StageSummary, set: &ContrastSet) -> Result<Vec<f64>> {
    if set.doses() != stage1.doses() || set.n() != stage1.n() {
        return Err(Error::contract("stage-1 contrasts must match the stage-1 design"));
    }
    Ok(set.coeffs().iter().map(|c| dot(c, stage1.means())).collect())
}

/// Conditional covariance of the combined statistics:
/// `Σ c_m2 c_m'2 / n_2 / √((v1_m + v2_m)(v1_m' + v2_m'))`.
pub fn adapted_covariance(stage1: &ContrastSet, stage2: &ContrastSet) -> Result<DMatrix<f64>> {
    if stage1.m() != stage2.m() {
        return Err(Error::contract("both stages need the same number of contrasts"));
    }
    let v1 = stage1.variance_factors();
    let v2 = stage2.variance_factors();
    let tot: Vec<f64> = v1.iter().zip(&v2).map(|(a, b)| a + b).collect();
    let m = stage1.m();
    Ok(DMatrix::from_fn(m, m, |a, b| {
        let cross: f64 = stage2.coeffs()[a]
            .iter()
            .zip(&stage2.coeffs()[b])
            .zip(stage2.n())
            .map(|((x, y), &n)| x * y / n as f64)
            .sum();
        cross / (tot[a] * tot[b]).sqrt()
    }))
}

fn stage_two_set<'a>(outcome: &'a AdaptationOutcome, stage2: &StageSummary, m: usize) -> Result<&'a ContrastSet> {
    let set = outcome
        .stage2_contrasts
        .as_ref()
        .ok_or_else(|| Error::contract("adaptation outcome has no stage-2 contrasts"))?;
    if set.doses() != stage2.doses() || set.n() != stage2.n() {
        return Err(Error::contract("stage-2 data must match the adapted doses and group sizes"));
    }
    if set.m() != m {
        return Err(Error::contract("both stages need the same number of contrasts"));
    }
    Ok(set)
}

/// Bound `u` with `P(shift + X ≤ u) = level`, `X ~ N(0, cov)`.
fn equicoordinate_root(cov: &DMatrix<f64>, shift: &[f64], level: f64, start: f64, opts: &QmcOptions) -> Result<f64> {
    if level >= 1.0 {
        return Ok(f64::INFINITY);
    }
    if level <= 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    let eq = EquiBox::prepare(cov, shift, Df::Infinite, start, opts)?;
    let f = |u: f64| Ok(eq.lower_fixed(u).value - level);
    // The adaptive value is usually close to the base one; start narrow.
    let (mut lo, mut hi) = (start - 0.5, start + 0.5);
    let (mut flo, mut fhi) = (f(lo)?, f(hi)?);
    let mut guard = 0;
    while flo > 0.0 && guard < 40 {
        lo -= 2.0 * (hi - lo);
        flo = f(lo)?;
        guard += 1;
    }
    while fhi < 0.0 && guard < 80 {
        hi += 2.0 * (hi - lo);
        fhi = f(hi)?;
        guard += 1;
    }
    if flo > 0.0 || fhi < 0.0 {
        return Err(Error::NumericalDomain(format!(
            "could not bracket the adaptive critical value for level {level}"
        )));
    }
    brent(f, (lo, flo), (hi, fhi), U_TOL, 200)
}

/// Known-variance AMCT.
pub fn amct_known_variance(
    base: &CrpBase,
    stage1: &StageSummary,
    stage2: Option<&StageSummary>,
    outcome: &AdaptationOutcome,
    sigma: f64,
    opts: &CrpOptions,
) -> Result<AmctResult> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::contract("sigma must be positive and finite"));
    }
    if base.df != Df::Infinite {
        return Err(Error::contract("known-variance test needs a Gaussian base critical value"));
    }
    let set1 = &base.contrasts;
    let num1 = stage_one_numerators(stage1, set1)?;
    let v1 = set1.variance_factors();
    let base_shift: Vec<f64> = num1.iter().zip(&v1).map(|(n, v)| n / (sigma * (2.0 * v).sqrt())).collect();
    let half = set1.corr().scale(0.5);
    let a = EquiBox::prepare(&half, &base_shift, Df::Infinite, base.critical, &opts.qmc)?
        .upper_tail(base.critical)
        .value;
    let mut state = CrpState {
        base_critical: base.critical,
        base_shift,
        conditional_error: a,
        adapted: None,
    };
    if outcome.futility_stop {
        return Ok(AmctResult {
            state,
            stats: Vec::new(),
            reject: false,
        });
    }
    let stage2 = stage2.ok_or_else(|| Error::contract("stage-2 data are required unless the trial stopped"))?;
    let set2 = stage_two_set(outcome, stage2, set1.m())?;
    let v2 = set2.variance_factors();
    let cov = adapted_covariance(set1, set2)?;
    let shift: Vec<f64> = num1
        .iter()
        .zip(v1.iter().zip(&v2))
        .map(|(n, (a, b))| n / (sigma * (a + b).sqrt()))
        .collect();
    let critical = equicoordinate_root(&cov, &shift, 1.0 - a, base.critical, &opts.qmc)?;
    let stats: Vec<f64> = set2
        .coeffs()
        .iter()
        .zip(&num1)
        .zip(v1.iter().zip(&v2))
        .map(|((c2, n1), (a, b))| (n1 + dot(c2, stage2.means())) / (sigma * (a + b).sqrt()))
        .collect();
    let reject = stats.iter().cloned().fold(f64::NEG_INFINITY, f64::max) >= critical;
    state.adapted = Some(AdaptedLaw { corr: cov, shift, critical });
    Ok(AmctResult { state, stats, reject })
}

/// Unknown-variance AMCT. The conditional error depends on σ; it is evaluated
/// at `sigma_ref`.
pub fn amct_unknown_variance(
    base: &CrpBase,
    stage1: &StageSummary,
    stage2: Option<&StageSummary>,
    outcome: &AdaptationOutcome,
    sigma_ref: f64,
    opts: &CrpOptions,
) -> Result<AmctResult> {
    if !(sigma_ref > 0.0) || !sigma_ref.is_finite() {
        return Err(Error::contract("reference sigma must be positive and finite"));
    }
    let set1 = &base.contrasts;
    let nu1 = stage1.df();
    if nu1 == 0 || base.df != Df::from_count(2 * nu1)? {
        return Err(Error::contract("base critical value must use 2ν₁ degrees of freedom"));
    }
    let num1 = stage_one_numerators(stage1, set1)?;
    let v1 = set1.variance_factors();
    let s2ref = sigma_ref * sigma_ref;
    let ss1 = stage1.ss_within();
    let base_shift: Vec<f64> = num1.iter().zip(&v1).map(|(n, v)| n / (sigma_ref * v.sqrt())).collect();
    let q_star = ss1 / (nu1 as f64 * s2ref);
    let nu1u = u32::try_from(nu1).map_err(|_| Error::contract("degrees of freedom too large"))?;
    let a = ConditionalOrthant::prepare(set1.corr(), &base_shift, q_star, nu1u, nu1u, base.critical, &opts.orthant)?
        .complement(base.critical)?;
    let mut state = CrpState {
        base_critical: base.critical,
        base_shift,
        conditional_error: a,
        adapted: None,
    };
    if outcome.futility_stop {
        return Ok(AmctResult {
            state,
            stats: Vec::new(),
            reject: false,
        });
    }
    let stage2 = stage2.ok_or_else(|| Error::contract("stage-2 data are required unless the trial stopped"))?;
    let set2 = stage_two_set(outcome, stage2, set1.m())?;
    let nu2 = stage2.df();
    if nu2 == 0 {
        return Err(Error::contract("stage 2 needs residual degrees of freedom"));
    }
    let nu = nu1 + nu2;
    let v2 = set2.variance_factors();
    let cov = adapted_covariance(set1, set2)?;
    let shift: Vec<f64> = num1
        .iter()
        .zip(v1.iter().zip(&v2))
        .map(|(n, (a, b))| n / (sigma_ref * (a + b).sqrt()))
        .collect();
    let q = ss1 / (nu as f64 * s2ref);
    let nu2u = u32::try_from(nu2).map_err(|_| Error::contract("degrees of freedom too large"))?;
    let nuu = u32::try_from(nu).map_err(|_| Error::contract("degrees of freedom too large"))?;
    let orth = ConditionalOrthant::prepare(&cov, &shift, q, nu2u, nuu, base.critical, &opts.orthant)?;
    let critical = solve_orthant(&orth, a, base.critical)?;

    let pooled = ((ss1 + stage2.ss_within()) / nu as f64).sqrt();
    if !(pooled > 0.0) {
        return Err(Error::DegenerateVariance);
    }
    let stats: Vec<f64> = set2
        .coeffs()
        .iter()
        .zip(&num1)
        .zip(v1.iter().zip(&v2))
        .map(|((c2, n1), (a, b))| (n1 + dot(c2, stage2.means())) / (pooled * (a + b).sqrt()))
        .collect();
    let reject = stats.iter().cloned().fold(f64::NEG_INFINITY, f64::max) >= critical;
    state.adapted = Some(AdaptedLaw { corr: cov, shift, critical });
    Ok(AmctResult { state, stats, reject })
}

/// Bisection for `c` with `complement(c) = a`.
fn solve_orthant(orth: &ConditionalOrthant, a: f64, start: f64) -> Result<f64> {
    if a <= 0.0 {
        return Ok(f64::INFINITY);
    }
    if a >= 1.0 {
        return Ok(f64::NEG_INFINITY);
    }
    let g = |c: f64| Ok(a - orth.complement(c)?);
    let (mut lo, mut hi) = (0.0f64.min(start - 6.0), start + 6.0);
    let mut guard = 0;
    while g(lo)? > 0.0 && guard < 40 {
        lo -= 2.0 * (hi - lo);
        guard += 1;
    }
    while g(hi)? < 0.0 && guard < 80 {
        hi += 2.0 * (hi - lo);
        guard += 1;
    }
    let (glo, ghi) = (g(lo)?, g(hi)?);
    if glo > 0.0 || ghi < 0.0 {
        return Err(Error::NumericalDomain(format!(
            "bisection bracket [{lo}, {hi}] does not contain the critical value: A = {a}, \
             complement at ends = ({}, {})",
            a - glo,
            a - ghi
        )));
    }
    bisect(g, lo, hi, C_TOL)
}
