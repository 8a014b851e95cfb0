//! Analysis of one two-stage (or one-stage) dataset.
//!
//! The simulator and the command-line `analyze` go through the functions in
//! this module with the same seeds, so a dumped replicate re-analysed from
//! disk reproduces the simulated decision exactly.

use adaptpoc_core::adapt::{adapt_doses, adapt_models, AdaptationConfig, AdaptationOutcome, DoseDecision};
use adaptpoc_core::contrast::ContrastSet;
use adaptpoc_core::crp::{amct_known_variance, amct_unknown_variance, AmctResult, CrpBase, CrpOptions};
use adaptpoc_core::data::StageSummary;
use adaptpoc_core::gmct::{
    combine_across, contrast_stats, raw_p_values, CombinationMethod, CrossStage, CrossStageMethod, GmctOptions,
    StageNull, Variance,
};
use adaptpoc_core::model::DoseResponseModel;
use adaptpoc_core::mvdist::{mv_equicoordinate_quantile, Df, QmcOptions};
use adaptpoc_core::rng::{derive_seed, stream_id, Purpose};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::method::{Design, MethodSpec, TestKind, VarianceMode};
use crate::scenario::Numerics;

/// Replicate slot reserved for draws that belong to the scenario as a whole.
const SCENARIO_SLOT: u64 = u32::MAX as u64;

/// Seed of the fixed-design (stage-1 and one-stage) null calibrations.
pub fn fixed_seed(seed: u64) -> u64 {
    derive_seed(seed, stream_id(SCENARIO_SLOT, Purpose::Calibration, 1))
}

/// Seed of a replicate's stage-2 null calibrations.
pub fn replicate_seed(seed: u64, replicate: u64) -> u64 {
    derive_seed(seed, stream_id(replicate, Purpose::Calibration, 2))
}

/// Seeds and accuracy settings of the random and quasi-random numerics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Calibration {
    #[serde(default)]
    pub numerics: Numerics,
    pub stage1_seed: u64,
    pub stage2_seed: u64,
}

impl Calibration {
    pub fn fixed_options(&self) -> GmctOptions {
        GmctOptions {
            qmc: QmcOptions {
                tol: self.numerics.qmc_tol,
                ..QmcOptions::default()
            },
            draws: self.numerics.stage1_draws,
            seed: self.stage1_seed,
            p_floor: self.numerics.p_floor,
        }
    }

    pub fn stage2_options(&self) -> GmctOptions {
        GmctOptions {
            qmc: QmcOptions {
                tol: self.numerics.stage2_tol,
                ..QmcOptions::default()
            },
            draws: self.numerics.stage2_draws,
            seed: self.stage2_seed,
            p_floor: self.numerics.p_floor,
        }
    }

    pub fn crp_options(&self) -> CrpOptions {
        CrpOptions {
            qmc: QmcOptions {
                tol: self.numerics.crp_tol,
                ..QmcOptions::default()
            },
            ..CrpOptions::default()
        }
    }

    pub fn fixed_qmc(&self) -> QmcOptions {
        self.fixed_options().qmc
    }
}

/// Everything that defines the test, apart from the data.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisPlan {
    pub doses: Vec<f64>,
    pub candidates: Vec<DoseResponseModel>,
    pub alpha: f64,
    pub adaptation: AdaptationConfig,
    pub method: MethodSpec,
    pub cross_stage: CrossStageMethod,
    /// σ for known-variance tests; the reference σ of the unknown-variance AMCT.
    pub sigma: Option<f64>,
    pub calibration: Calibration,
}

pub fn variance(mode: VarianceMode, sigma: Option<f64>) -> Result<Variance> {
    match mode {
        VarianceMode::Unknown => Ok(Variance::Estimated),
        VarianceMode::Known => sigma
            .filter(|s| *s > 0.0 && s.is_finite())
            .map(Variance::Known)
            .ok_or_else(|| SimError::Config("known-variance methods need a positive sigma".into())),
    }
}

/// Max-statistic critical value of a one-stage multiple contrast test.
pub fn one_stage_critical(set: &ContrastSet, df: Df, alpha: f64, qmc: &QmcOptions) -> Result<f64> {
    Ok(mv_equicoordinate_quantile(set.corr(), df, 1.0 - alpha, qmc)?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageReport {
    pub doses: Vec<f64>,
    pub n: Vec<usize>,
    pub means: Vec<f64>,
    /// Pooled within-group variance, when defined.
    pub variance: Option<f64>,
    pub contrasts: Vec<Vec<f64>>,
    pub statistics: Vec<f64>,
    pub raw_p: Vec<f64>,
    /// Combination statistic and stage p-value (generalized tests only).
    pub psi: Option<f64>,
    pub p_value: Option<f64>,
}

impl StageReport {
    fn new(data: &StageSummary, set: &ContrastSet, stats: &[f64], df: Df) -> Self {
        Self {
            doses: data.doses().to_vec(),
            n: data.n().to_vec(),
            means: data.means().to_vec(),
            variance: data.pooled_variance().ok(),
            contrasts: set.coeffs().to_vec(),
            statistics: stats.to_vec(),
            raw_p: raw_p_values(stats, df),
            psi: None,
            p_value: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdaptationReport {
    pub futility_stop: bool,
    pub retained_doses: Vec<f64>,
    pub provenance: Vec<&'static str>,
    pub degenerate_fallback: Vec<bool>,
}

impl AdaptationReport {
    pub fn new(outcome: &AdaptationOutcome) -> Self {
        Self {
            futility_stop: outcome.futility_stop,
            retained_doses: outcome.retained_doses.clone(),
            provenance: outcome.provenance.iter().map(|p| p.tag()).collect(),
            degenerate_fallback: outcome.degenerate_fallback.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CrpReport {
    pub base_critical: f64,
    pub conditional_error: f64,
    pub adaptive_critical: Option<f64>,
    pub combined_statistics: Vec<f64>,
}

impl CrpReport {
    fn new(r: &AmctResult) -> Self {
        Self {
            base_critical: r.state.base_critical,
            conditional_error: r.state.conditional_error,
            adaptive_critical: r.state.adapted.as_ref().map(|a| a.critical),
            combined_statistics: r.stats.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalysisReport {
    pub method: MethodSpec,
    pub alpha: f64,
    pub stage1: StageReport,
    pub adaptation: Option<AdaptationReport>,
    pub stage2: Option<StageReport>,
    /// Cross-stage combination of the generalized test.
    pub overall: Option<CrossStage>,
    /// One-stage critical value of the non-adaptive max-statistic test.
    pub critical_value: Option<f64>,
    pub crp: Option<CrpReport>,
    pub reject: bool,
}

/// Adaptive generalized test from stage p-values; a futility stop (no `p2`)
/// never rejects.
pub fn agmct_decision(
    p1: f64,
    p2: Option<f64>,
    cross: CrossStageMethod,
    floor: f64,
    alpha: f64,
) -> Result<(Option<CrossStage>, bool)> {
    match p2 {
        None => Ok((None, false)),
        Some(p2) => {
            let c = combine_across(p1, p2, cross, floor)?;
            Ok((Some(c), c.p <= alpha))
        }
    }
}

fn max(v: &[f64]) -> f64 {
    v.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
}

/// Interim decision and stage-2 contrasts for the observed stage-2 sizes.
pub fn interim(
    stage1: &StageSummary,
    candidates: &[DoseResponseModel],
    set1: &ContrastSet,
    n2: Option<&[usize]>,
    config: &AdaptationConfig,
) -> Result<AdaptationOutcome> {
    match adapt_doses(stage1, config)? {
        DoseDecision::FutilityStop => Ok(AdaptationOutcome::futility(vec![0.0], candidates.len())),
        DoseDecision::Retained(doses) => {
            let n2 = n2.ok_or_else(|| SimError::Config("stage-2 data are required: the trial continued".into()))?;
            if n2.len() != doses.len() {
                return Err(SimError::Config(format!(
                    "stage-2 doses must be exactly the retained doses {doses:?}"
                )));
            }
            Ok(adapt_models(stage1, candidates, set1, &doses, n2, config)?)
        }
    }
}

/// Runs the planned test on stage-1 data and, for adaptive designs that
/// continued, stage-2 data.
pub fn analyze(plan: &AnalysisPlan, stage1: &StageSummary, stage2: Option<&StageSummary>) -> Result<AnalysisReport> {
    if stage1.doses() != plan.doses.as_slice() {
        return Err(SimError::Config(format!(
            "stage-1 doses {:?} differ from the design doses {:?}",
            stage1.doses(),
            plan.doses
        )));
    }
    let set1 = ContrastSet::from_models(&plan.candidates, stage1.doses(), stage1.n())?;
    let var = variance(plan.method.variance, plan.sigma)?;
    let (stats1, df1) = contrast_stats(stage1, &set1, var)?;
    let mut report = AnalysisReport {
        method: plan.method,
        alpha: plan.alpha,
        stage1: StageReport::new(stage1, &set1, &stats1, df1),
        adaptation: None,
        stage2: None,
        overall: None,
        critical_value: None,
        crp: None,
        reject: false,
    };
    let cal = &plan.calibration;

    if plan.method.design == Design::NonAdaptive {
        if stage2.is_some() {
            return Err(SimError::Config("a non-adaptive analysis takes single-stage data".into()));
        }
        match plan.method.test.combination() {
            Some(method) => {
                let null = StageNull::prepare(set1.corr(), df1, method, &cal.fixed_options())?;
                let p = null.p_value(&stats1)?;
                report.stage1.psi = Some(null.statistic(&stats1));
                report.stage1.p_value = Some(p);
                report.reject = p <= plan.alpha;
            }
            None => {
                let crit = one_stage_critical(&set1, df1, plan.alpha, &cal.fixed_qmc())?;
                report.critical_value = Some(crit);
                report.reject = max(&stats1) >= crit;
            }
        }
        return Ok(report);
    }

    let outcome = interim(stage1, &plan.candidates, &set1, stage2.map(|s| s.n()), &plan.adaptation)?;
    report.adaptation = Some(AdaptationReport::new(&outcome));
    let stage2 = if outcome.futility_stop {
        if stage2.is_some() {
            return Err(SimError::Config("stage-2 data present but the trial stopped for futility".into()));
        }
        None
    } else {
        let s2 = stage2.expect("checked by interim");
        if s2.doses() != outcome.retained_doses.as_slice() {
            return Err(SimError::Config(format!(
                "stage-2 doses {:?} differ from the retained doses {:?}",
                s2.doses(),
                outcome.retained_doses
            )));
        }
        Some(s2)
    };

    match plan.method.test {
        TestKind::Amct => {
            let opts = cal.crp_options();
            let sigma = plan
                .sigma
                .ok_or_else(|| SimError::Config("the AMCT needs sigma (reference sigma if unknown)".into()))?;
            let r = match plan.method.variance {
                VarianceMode::Known => {
                    let base = CrpBase::known(set1.clone(), plan.alpha, &opts)?;
                    amct_known_variance(&base, stage1, stage2, &outcome, sigma, &opts)?
                }
                VarianceMode::Unknown => {
                    let base = CrpBase::unknown(set1.clone(), stage1.df(), plan.alpha, &opts)?;
                    amct_unknown_variance(&base, stage1, stage2, &outcome, sigma, &opts)?
                }
            };
            if let (Some(s2), Some(set2)) = (stage2, outcome.stage2_contrasts.as_ref()) {
                let (stats2, df2) = contrast_stats(s2, set2, var)?;
                report.stage2 = Some(StageReport::new(s2, set2, &stats2, df2));
            }
            report.crp = Some(CrpReport::new(&r));
            report.reject = r.reject;
        }
        test => {
            let method = test.combination().expect("generalized test");
            let null1 = StageNull::prepare(set1.corr(), df1, method, &cal.fixed_options())?;
            let p1 = null1.p_value(&stats1)?;
            report.stage1.psi = Some(null1.statistic(&stats1));
            report.stage1.p_value = Some(p1);
            let mut p2 = None;
            if let (Some(s2), Some(set2)) = (stage2, outcome.stage2_contrasts.as_ref()) {
                let (stats2, df2) = contrast_stats(s2, set2, var)?;
                let null2 = stage2_nulls(set2, df2, &[method], cal)?.remove(0);
                let p = null2.p_value(&stats2)?;
                let mut st = StageReport::new(s2, set2, &stats2, df2);
                st.psi = Some(null2.statistic(&stats2));
                st.p_value = Some(p);
                report.stage2 = Some(st);
                p2 = Some(p);
            }
            let (overall, reject) = agmct_decision(p1, p2, plan.cross_stage, cal.numerics.p_floor, plan.alpha)?;
            report.overall = overall;
            report.reject = reject;
        }
    }
    Ok(report)
}

/// Stage-2 nulls for the adapted design; methods share Monte Carlo draws.
pub fn stage2_nulls(
    set2: &ContrastSet,
    df: Df,
    methods: &[CombinationMethod],
    cal: &Calibration,
) -> Result<Vec<StageNull>> {
    Ok(StageNull::prepare_many(set2.corr(), df, methods, &cal.stage2_options())?)
}
