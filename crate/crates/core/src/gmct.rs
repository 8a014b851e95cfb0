//! Generalized multiple contrast tests within a stage and p-value combination
//! across stages.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::contrast::ContrastSet;
use crate::data::StageSummary;
use crate::error::{Error, Result};
use crate::mvdist::univariate::{chisq_sf, norm_isf, norm_sf, t_sf};
use crate::mvdist::{univariate_quantile, Df, EquiBox, QmcOptions};
use crate::rng::substream;
use crate::score::ScoreTable;

/// Smallest p-value passed to logarithms and normal quantiles.
pub const P_FLOOR: f64 = 1e-12;

/// Tippett p-values are integrated to the absolute tolerance or to this
/// fraction of the p-value, whichever is looser.
const P_REL_TOL: f64 = 0.01;

/// Draws per calibration block; each block has its own random stream.
const BLOCK: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombinationMethod {
    Tippett,
    Fisher,
    InverseNormal,
}

impl CombinationMethod {
    pub const ALL: [CombinationMethod; 3] = [Self::Tippett, Self::Fisher, Self::InverseNormal];

    pub fn tag(self) -> &'static str {
        match self {
            Self::Tippett => "tippett",
            Self::Fisher => "fisher",
            Self::InverseNormal => "inverse_normal",
        }
    }

    /// One-letter label used in report columns.
    pub fn letter(self) -> char {
        match self {
            Self::Tippett => 'T',
            Self::Fisher => 'F',
            Self::InverseNormal => 'N',
        }
    }
}

impl fmt::Display for CombinationMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for CombinationMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.tag() == s)
            .ok_or_else(|| Error::contract(format!("unknown combination method '{s}'")))
    }
}

/// Combination of the two stage-wise p-values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrossStageMethod {
    Fisher,
    InverseNormal,
}

/// Whether σ is known or estimated by the pooled within-group variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variance {
    Known(f64),
    Estimated,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GmctOptions {
    /// Box-probability accuracy for the Tippett null.
    pub qmc: QmcOptions,
    /// Monte Carlo draws for the Fisher and inverse-normal nulls.
    pub draws: usize,
    pub seed: u64,
    pub p_floor: f64,
}

impl Default for GmctOptions {
    fn default() -> Self {
        Self {
            qmc: QmcOptions::default(),
            draws: 200_000,
            seed: 0x9e37_79b9_7f4a_7c15,
            p_floor: P_FLOOR,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmctResult {
    pub t_stats: Vec<f64>,
    pub raw_p: Vec<f64>,
    pub psi: f64,
    pub stage_p: f64,
    pub method: CombinationMethod,
}

fn check_layout(data: &StageSummary, contrasts: &ContrastSet) -> Result<()> {
    if contrasts.doses() != data.doses() || contrasts.n() != data.n() {
        return Err(Error::contract("contrast doses and group sizes must match the data"));
    }
    Ok(())
}

fn numerators(data: &StageSummary, contrasts: &ContrastSet) -> Vec<(f64, f64)> {
    contrasts
        .coeffs()
        .iter()
        .zip(contrasts.variance_factors())
        .map(|(c, v)| (c.iter().zip(data.means()).map(|(a, b)| a * b).sum(), v))
        .collect()
}

/// `T_m = Σ c_mi Ȳ_i / (S √(Σ c_mi²/n_i))` with the pooled within-stage `S`.
pub fn contrast_t_stats(data: &StageSummary, contrasts: &ContrastSet) -> Result<Vec<f64>> {
    check_layout(data, contrasts)?;
    let s = data.pooled_variance()?.sqrt();
    Ok(numerators(data, contrasts).into_iter().map(|(num, v)| num / (s * v.sqrt())).collect())
}

/// Contrast z-statistics with σ known.
pub fn contrast_z_stats(data: &StageSummary, contrasts: &ContrastSet, sigma: f64) -> Result<Vec<f64>> {
    check_layout(data, contrasts)?;
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::contract("sigma must be positive and finite"));
    }
    Ok(numerators(data, contrasts).into_iter().map(|(num, v)| num / (sigma * v.sqrt())).collect())
}

/// Statistics and their null df under the given variance mode.
pub fn contrast_stats(data: &StageSummary, contrasts: &ContrastSet, variance: Variance) -> Result<(Vec<f64>, Df)> {
    match variance {
        Variance::Known(sigma) => Ok((contrast_z_stats(data, contrasts, sigma)?, Df::Infinite)),
        Variance::Estimated => Ok((contrast_t_stats(data, contrasts)?, Df::from_count(data.df())?)),
    }
}

/// One-sided upper-tail p-values.
pub fn raw_p_values(stats: &[f64], df: Df) -> Vec<f64> {
    stats.iter().map(|&t| t_sf(t, df)).collect()
}

/// `Φ⁻¹(1 − p)` for `p = P(T > t)`, with `p` floored on both sides.
/// Ψ evaluator with the per-df score table fetched once.
struct Scorer {
    method: CombinationMethod,
    df: Df,
    floor: f64,
    table: Option<Arc<ScoreTable>>,
}

impl Scorer {
    fn new(method: CombinationMethod, df: Df, floor: f64) -> Self {
        let table = match (method, df) {
            (CombinationMethod::Tippett, _) | (CombinationMethod::InverseNormal, Df::Infinite) => None,
            _ => Some(ScoreTable::shared(df, floor)),
        };
        Self {
            method,
            df,
            floor,
            table,
        }
    }

    fn eval(&self, stats: &[f64]) -> f64 {
        match (self.method, &self.table) {
            (CombinationMethod::Fisher, Some(tab)) => stats.iter().map(|&t| tab.fisher(t)).sum(),
            (CombinationMethod::InverseNormal, Some(tab)) => stats.iter().map(|&t| tab.normal(t)).sum(),
            (CombinationMethod::InverseNormal, None) => {
                let cap = norm_isf(self.floor);
                stats.iter().map(|&t| t.clamp(-cap, cap)).sum()
            }
            _ => {
                let tmax = stats.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                t_sf(tmax, self.df)
            }
        }
    }
}

/// Combination statistic Ψ. For Tippett it is the smallest raw p-value.
/// Fisher and inverse-normal scores come from a shared interpolation table
/// accurate to about 1e-9.
pub fn combination_statistic(method: CombinationMethod, stats: &[f64], df: Df, floor: f64) -> f64 {
    Scorer::new(method, df, floor).eval(stats)
}

/// Null law of a stage-wise combination statistic for one correlation and df.
///
/// Preparing it once and reusing it across datasets is what makes the
/// simulation affordable when the design does not change.
#[derive(Clone)]
pub struct StageNull {
    scorer: Arc<Scorer>,
    law: NullLaw,
}

#[derive(Debug, Clone)]
enum NullLaw {
    /// Tippett: `P(max T ≥ t)` from the multivariate t box probability.
    MaxBox(Box<EquiBox>),
    /// Inverse normal with σ known: Ψ is exactly `N(0, 1ᵀR1)`.
    Normal { sd: f64 },
    /// Sorted simulated Ψ values.
    Sample(Vec<f64>),
}

impl std::fmt::Debug for StageNull {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("StageNull")
            .field("method", &self.scorer.method)
            .field("df", &self.scorer.df)
            .finish_non_exhaustive()
    }
}

fn needs_sample(method: CombinationMethod, df: Df) -> bool {
    !matches!(
        (method, df),
        (CombinationMethod::Tippett, _) | (CombinationMethod::InverseNormal, Df::Infinite)
    )
}

impl StageNull {
    pub fn prepare(corr: &DMatrix<f64>, df: Df, method: CombinationMethod, opts: &GmctOptions) -> Result<Self> {
        Ok(Self::prepare_many(corr, df, &[method], opts)?.remove(0))
    }

    /// Nulls for several methods on the same correlation and df. Monte Carlo
    /// laws share one set of draws, and each result is identical to what
    /// [`StageNull::prepare`] returns for that method alone.
    pub fn prepare_many(
        corr: &DMatrix<f64>,
        df: Df,
        methods: &[CombinationMethod],
        opts: &GmctOptions,
    ) -> Result<Vec<Self>> {
        let m = corr.nrows();
        if m == 0 || corr.ncols() != m {
            return Err(Error::contract("correlation matrix must be square and nonempty"));
        }
        let sampled: Vec<CombinationMethod> = methods.iter().copied().filter(|&k| needs_sample(k, df)).collect();
        let mut samples = if sampled.is_empty() {
            Vec::new()
        } else {
            simulate_null_statistics_many(corr, df, &sampled, opts.draws, opts.seed, opts.p_floor)?
        };
        let mut out = Vec::with_capacity(methods.len());
        for &method in methods {
            let law = match (method, df) {
                (CombinationMethod::Tippett, _) => {
                    let reference = univariate_quantile(1.0 - 0.05 / (2.0 * m as f64), df);
                    NullLaw::MaxBox(Box::new(EquiBox::prepare(corr, &vec![0.0; m], df, reference, &opts.qmc)?))
                }
                (CombinationMethod::InverseNormal, Df::Infinite) => {
                    let var = corr.sum();
                    if !(var > 0.0) {
                        return Err(Error::NumericalDomain("sum of the correlation matrix is not positive".into()));
                    }
                    NullLaw::Normal { sd: var.sqrt() }
                }
                _ => {
                    let at = sampled.iter().position(|&k| k == method).expect("sampled method");
                    NullLaw::Sample(std::mem::take(&mut samples[at]))
                }
            };
            out.push(Self {
                scorer: Arc::new(Scorer::new(method, df, opts.p_floor)),
                law,
            });
        }
        Ok(out)
    }

    pub fn method(&self) -> CombinationMethod {
        self.scorer.method
    }

    pub fn df(&self) -> Df {
        self.scorer.df
    }

    /// Ψ for the observed statistics.
    pub fn statistic(&self, stats: &[f64]) -> f64 {
        self.scorer.eval(stats)
    }

    /// Stage p-value of the observed statistics.
    pub fn p_value(&self, stats: &[f64]) -> Result<f64> {
        if stats.iter().any(|v| v.is_nan()) {
            return Err(Error::NumericalDomain("test statistic is NaN".into()));
        }
        let p = match &self.law {
            NullLaw::MaxBox(eq) => {
                let tmax = stats.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                eq.upper_tail_within(tmax, P_REL_TOL).value
            }
            NullLaw::Normal { sd } => norm_sf(self.statistic(stats) / sd),
            NullLaw::Sample(sorted) => {
                let psi = self.statistic(stats);
                let below = sorted.partition_point(|&v| v < psi);
                (1 + sorted.len() - below) as f64 / (sorted.len() + 1) as f64
            }
        };
        Ok(p.clamp(0.0, 1.0))
    }
}

/// Sorted Ψ values of `draws` central multivariate t (or normal) vectors.
/// Blocks of draws use independent substreams, so the sample is identical
/// for any thread count.
pub fn simulate_null_statistics(
    corr: &DMatrix<f64>,
    df: Df,
    method: CombinationMethod,
    draws: usize,
    seed: u64,
    floor: f64,
) -> Result<Vec<f64>> {
    Ok(simulate_null_statistics_many(corr, df, &[method], draws, seed, floor)?.remove(0))
}

/// As [`simulate_null_statistics`] for several methods evaluated on the same
/// draws.
pub fn simulate_null_statistics_many(
    corr: &DMatrix<f64>,
    df: Df,
    methods: &[CombinationMethod],
    draws: usize,
    seed: u64,
    floor: f64,
) -> Result<Vec<Vec<f64>>> {
    if draws == 0 {
        return Err(Error::contract("calibration needs at least one draw"));
    }
    let root = psd_root(corr)?;
    let m = corr.nrows();
    let chi = match df {
        Df::Finite(nu) => Some((ChiSquared::new(nu as f64).expect("positive df"), nu as f64)),
        Df::Infinite => None,
    };
    let scorers: Vec<Scorer> = methods.iter().map(|&k| Scorer::new(k, df, floor)).collect();
    let blocks = draws.div_ceil(BLOCK);
    let per_block: Vec<Vec<Vec<f64>>> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut rng = substream(seed, b as u64);
            let len = BLOCK.min(draws - b * BLOCK);
            let mut z = vec![0.0; m];
            let mut t = vec![0.0; m];
            let mut vals = vec![Vec::with_capacity(len); scorers.len()];
            for _ in 0..len {
                for v in z.iter_mut() {
                    *v = rng.sample(StandardNormal);
                }
                let s = chi.as_ref().map_or(1.0, |(d, nu)| (d.sample(&mut rng) / nu).sqrt());
                for (i, ti) in t.iter_mut().enumerate() {
                    *ti = (0..m).map(|j| root[(i, j)] * z[j]).sum::<f64>() / s;
                }
                for (out, sc) in vals.iter_mut().zip(&scorers) {
                    out.push(sc.eval(&t));
                }
            }
            vals
        })
        .collect();
    let mut out = vec![Vec::with_capacity(draws); methods.len()];
    for block in per_block {
        for (dst, src) in out.iter_mut().zip(block) {
            dst.extend(src);
        }
    }
    for v in out.iter_mut() {
        v.sort_by(f64::total_cmp);
    }
    Ok(out)
}

/// Symmetric square root of a PSD matrix; small negative eigenvalues from
/// rounding are set to zero.
pub(crate) fn psd_root(corr: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = corr.clone().symmetric_eigen();
    let scale = eig.eigenvalues.iter().cloned().fold(0.0, f64::max).max(1.0);
    if eig.eigenvalues.iter().any(|&v| v < -1e-8 * scale || !v.is_finite()) {
        return Err(Error::NumericalDomain("correlation matrix is not positive semi-definite".into()));
    }
    let sqrt = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&sqrt))
}

/// Stage-wise GMCT p-value for observed statistics.
pub fn stage_p_value(
    stats: &[f64],
    corr: &DMatrix<f64>,
    df: Df,
    method: CombinationMethod,
    opts: &GmctOptions,
) -> Result<f64> {
    if stats.len() != corr.nrows() {
        return Err(Error::contract("one statistic per contrast is required"));
    }
    StageNull::prepare(corr, df, method, opts)?.p_value(stats)
}

/// Full GMCT on one stage's data.
pub fn gmct(
    data: &StageSummary,
    contrasts: &ContrastSet,
    variance: Variance,
    method: CombinationMethod,
    opts: &GmctOptions,
) -> Result<GmctResult> {
    let (stats, df) = contrast_stats(data, contrasts, variance)?;
    let null = StageNull::prepare(contrasts.corr(), df, method, opts)?;
    Ok(GmctResult {
        raw_p: raw_p_values(&stats, df),
        psi: null.statistic(&stats),
        stage_p: null.p_value(&stats)?,
        t_stats: stats,
        method,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrossStage {
    pub psi: f64,
    pub p: f64,
    /// Set when an input p-value was raised to the floor.
    pub floored: bool,
}

/// Equal-weight Fisher or inverse-normal combination of `p1` and `p2`.
pub fn combine_across(p1: f64, p2: f64, method: CrossStageMethod, floor: f64) -> Result<CrossStage> {
    for p in [p1, p2] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::contract("stage p-values must lie in [0, 1]"));
        }
    }
    let floored = p1 < floor || p2 < floor;
    let (a, b) = (p1.max(floor), p2.max(floor));
    Ok(match method {
        CrossStageMethod::Fisher => {
            let psi = -2.0 * (a.ln() + b.ln());
            CrossStage {
                psi,
                p: chisq_sf(psi, 4.0),
                floored,
            }
        }
        CrossStageMethod::InverseNormal => {
            let psi = norm_isf(a) + norm_isf(b);
            CrossStage {
                psi,
                p: norm_sf(psi / std::f64::consts::SQRT_2),
                floored,
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::catalog;

    fn stage_one() -> (StageSummary, ContrastSet) {
        let data = StageSummary::with_sd(catalog::DOSES.to_vec(), vec![24; 5], vec![0.52, 0.47, 1.09, 1.70, 0.45], 1.58)
            .unwrap();
        let set = ContrastSet::from_models(&catalog::candidates(), &catalog::DOSES, &[24; 5]).unwrap();
        (data, set)
    }

    #[test]
    fn quadratic_t_statistic() {
        let (data, set) = stage_one();
        let t = contrast_t_stats(&data, &set).unwrap();
        // Direct evaluation: c41 · ȳ / (s √(Σc²/24)), c41 unit norm.
        let c = &set.coeffs()[3];
        let num: f64 = c.iter().zip(data.means()).map(|(a, b)| a * b).sum();
        let direct = num / (1.58 * (1.0f64 / 24.0).sqrt());
        assert!((t[3] - direct).abs() < 1e-12);
        // The printed two-decimal coefficients give 2.94; the exact contrast 2.925.
        assert!((t[3] - 2.94).abs() < 0.02, "{}", t[3]);
        let printed = [-0.57, -0.36, 0.16, 0.71, 0.07];
        let num: f64 = printed.iter().zip(data.means()).map(|(a, b)| a * b).sum();
        let den = 1.58 * (1.0f64 / 24.0).sqrt();
        assert!((num / den - 2.94).abs() < 0.005);
    }

    #[test]
    fn constant_means_give_zero_statistics() {
        let (_, set) = stage_one();
        let flat = StageSummary::with_sd(catalog::DOSES.to_vec(), vec![24; 5], vec![0.3; 5], 1.0).unwrap();
        assert!(contrast_t_stats(&flat, &set).unwrap().iter().all(|t| t.abs() < 1e-14));
    }

    #[test]
    fn contrast_scale_invariance() {
        let (data, set) = stage_one();
        let doubled: Vec<Vec<f64>> = set.coeffs().iter().map(|c| c.iter().map(|v| 2.0 * v).collect()).collect();
        let set2 = ContrastSet::new(doubled, set.doses().to_vec(), set.n().to_vec()).unwrap();
        let a = contrast_t_stats(&data, &set).unwrap();
        let b = contrast_t_stats(&data, &set2).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_variance_is_reported() {
        let (_, set) = stage_one();
        let data = StageSummary::new(catalog::DOSES.to_vec(), vec![24; 5], vec![0.1, 0.2, 0.3, 0.4, 0.5], 0.0).unwrap();
        assert_eq!(contrast_t_stats(&data, &set), Err(Error::DegenerateVariance));
    }

    #[test]
    fn single_contrast_reduces_to_raw_p() {
        let corr = DMatrix::from_element(1, 1, 1.0);
        let opts = GmctOptions {
            draws: 100_000,
            ..GmctOptions::default()
        };
        for df in [Df::Finite(20), Df::Infinite] {
            for t in [0.3, 1.7] {
                let raw = t_sf(t, df);
                for method in CombinationMethod::ALL {
                    let p = stage_p_value(&[t], &corr, df, method, &opts).unwrap();
                    let se = (raw * (1.0 - raw) / opts.draws as f64).sqrt();
                    assert!((p - raw).abs() < 4.0 * se + 1e-9, "{method} {df:?} {t}: {p} vs {raw}");
                }
            }
        }
    }

    #[test]
    fn known_variance_inverse_normal_matches_simulation() {
        let (_, set) = stage_one();
        let z = [1.2, 0.9, 0.5, 2.1, 1.0];
        let opts = GmctOptions::default();
        let exact = stage_p_value(&z, set.corr(), Df::Infinite, CombinationMethod::InverseNormal, &opts).unwrap();
        let sample = simulate_null_statistics(set.corr(), Df::Infinite, CombinationMethod::InverseNormal, 200_000, 5, P_FLOOR)
            .unwrap();
        let psi: f64 = z.iter().sum();
        let mc = sample.iter().filter(|&&v| v >= psi).count() as f64 / sample.len() as f64;
        assert!((exact - mc).abs() < 4.0 * (mc * (1.0 - mc) / 2e5).sqrt(), "{exact} vs {mc}");
    }

    #[test]
    fn calibration_is_seed_deterministic() {
        let (_, set) = stage_one();
        let a = simulate_null_statistics(set.corr(), Df::Finite(115), CombinationMethod::Fisher, 10_000, 9, P_FLOOR).unwrap();
        let b = simulate_null_statistics(set.corr(), Df::Finite(115), CombinationMethod::Fisher, 10_000, 9, P_FLOOR).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn cross_stage_combinations() {
        let f = combine_across(0.005, 0.005, CrossStageMethod::Fisher, P_FLOOR).unwrap();
        assert!((f.psi - 21.23).abs() < 0.3 && (f.p - 0.0003).abs() < 2e-4, "{f:?}");
        let n = combine_across(0.005, 0.005, CrossStageMethod::InverseNormal, P_FLOOR).unwrap();
        assert!((n.psi - 5.16).abs() < 0.05 && (n.p - 0.0001).abs() < 2e-4, "{n:?}");
        let half = combine_across(0.5, 0.5, CrossStageMethod::InverseNormal, P_FLOOR).unwrap();
        assert!(half.psi.abs() < 1e-15 && (half.p - 0.5).abs() < 1e-15);
        let g = combine_across(0.047, 0.008, CrossStageMethod::Fisher, P_FLOOR).unwrap();
        assert!((g.psi - 15.78).abs() < 0.02 && (g.p - 0.003).abs() < 5e-4, "{g:?}");
        let z = combine_across(0.0, 0.3, CrossStageMethod::Fisher, P_FLOOR).unwrap();
        assert!(z.floored && z.psi.is_finite());
    }

    #[test]
    fn fisher_closed_form_matches_chi_square() {
        // χ²₄ survival function is exp(−x/2)(1 + x/2).
        for x in [0.5, 4.0, 13.3, 30.0] {
            assert!((chisq_sf(x, 4.0) - (-x / 2.0f64).exp() * (1.0 + x / 2.0)).abs() < 1e-14);
        }
    }
}
