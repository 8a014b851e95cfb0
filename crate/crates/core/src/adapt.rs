//! Interim adaptation: dose dropping and candidate-model refitting with
//! fallbacks for models that cannot be fitted.

use serde::{Deserialize, Serialize};

use crate::contrast::{optimal_contrast, ContrastSet};
use crate::data::StageSummary;
use crate::error::{Error, Result};
use crate::fit::{fit, FitBounds};
use crate::isotonic::isotonic_group_means;
use crate::model::{DoseResponseModel, ModelFamily};

/// Threshold δ of the dose-dropping rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Delta {
    Value(f64),
    /// δ is the standard error of the difference of the two compared means,
    /// from the pooled stage-1 variance.
    StandardError,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelPolicy {
    RefitWithFallbacks,
    NoModelAdaptation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptationConfig {
    pub delta: Delta,
    pub model_policy: ModelPolicy,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        Self {
            delta: Delta::Value(0.0),
            model_policy: ModelPolicy::RefitWithFallbacks,
        }
    }
}

impl AdaptationConfig {
    pub fn validate(&self) -> Result<()> {
        match self.delta {
            Delta::Value(d) if !(d >= 0.0) || !d.is_finite() => Err(Error::contract("delta must be finite and >= 0")),
            _ => Ok(()),
        }
    }
}

/// Where a stage-2 contrast came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    /// Optimal contrast of the refitted model.
    Refit,
    /// Optimal contrast of the isotonic regression of the stage-1 means.
    IsotonicFallback,
    /// Stage-1 contrast restricted to the retained doses.
    CarryOver,
    /// Original candidate model: the linear fit had a negative slope.
    NegativeSlopeNoAdapt,
    /// Original candidate model: model adaptation switched off.
    Original,
}

impl Provenance {
    pub fn tag(self) -> &'static str {
        match self {
            Self::Refit => "refit",
            Self::IsotonicFallback => "isotonic_fallback",
            Self::CarryOver => "carry_over",
            Self::NegativeSlopeNoAdapt => "negative_slope_no_adapt",
            Self::Original => "original",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DoseDecision {
    Retained(Vec<f64>),
    FutilityStop,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptationOutcome {
    pub retained_doses: Vec<f64>,
    pub futility_stop: bool,
    /// `None` exactly when the trial stops for futility.
    pub stage2_contrasts: Option<ContrastSet>,
    pub provenance: Vec<Provenance>,
    /// Refitted models, where a fit succeeded and was used.
    pub fitted: Vec<Option<DoseResponseModel>>,
    /// Models whose first-choice contrast was degenerate and fell back further.
    pub degenerate_fallback: Vec<bool>,
}

impl AdaptationOutcome {
    pub fn futility(retained_doses: Vec<f64>, m: usize) -> Self {
        Self {
            retained_doses,
            futility_stop: true,
            stage2_contrasts: None,
            provenance: vec![Provenance::Original; m],
            fitted: vec![None; m],
            degenerate_fallback: vec![false; m],
        }
    }
}

/// Threshold for comparing groups `i` and `j`.
fn threshold(stage1: &StageSummary, delta: Delta, i: usize, j: usize) -> Result<f64> {
    match delta {
        Delta::Value(d) => Ok(d),
        Delta::StandardError => {
            let s2 = stage1.pooled_variance()?;
            let n = stage1.n();
            Ok((s2 * (1.0 / n[i] as f64 + 1.0 / n[j] as f64)).sqrt())
        }
    }
}

/// Keeps placebo, drops actives that trail placebo by more than δ (stopping
/// for futility if none survive), then walks the survivors in dose order and
/// keeps each one whose mean is at least the last kept mean minus δ.
pub fn adapt_doses(stage1: &StageSummary, config: &AdaptationConfig) -> Result<DoseDecision> {
    config.validate()?;
    let y = stage1.means();
    let mut survivors = Vec::new();
    for i in 1..stage1.k() {
        if y[i] - y[0] >= -threshold(stage1, config.delta, i, 0)? {
            survivors.push(i);
        }
    }
    if survivors.is_empty() {
        return Ok(DoseDecision::FutilityStop);
    }
    let mut kept = vec![0usize];
    for i in survivors {
        let last = *kept.last().expect("placebo is always kept");
        if y[i] - y[last] >= -threshold(stage1, config.delta, i, last)? {
            kept.push(i);
        }
    }
    debug_assert!(kept.len() >= 2, "the first survivor always passes its comparison with placebo");
    Ok(DoseDecision::Retained(kept.into_iter().map(|i| stage1.doses()[i]).collect()))
}

/// Splits `total` subjects over `k` groups, remainder to the lowest doses.
pub fn allocate(total: usize, k: usize) -> Result<Vec<usize>> {
    if k == 0 || total < k {
        return Err(Error::contract("stage-2 sample size must give every group at least one subject"));
    }
    let (base, rem) = (total / k, total % k);
    Ok((0..k).map(|i| base + usize::from(i < rem)).collect())
}

/// Stage-1 contrast restricted to the retained doses, re-centred and rescaled
/// to unit norm.
pub fn carry_over(contrast: &[f64], stage1_doses: &[f64], retained: &[f64]) -> Result<Vec<f64>> {
    let mut c = Vec::with_capacity(retained.len());
    for d in retained {
        let i = stage1_doses
            .iter()
            .position(|x| x == d)
            .ok_or_else(|| Error::contract("retained dose is not a stage-1 dose"))?;
        c.push(contrast[i]);
    }
    let mean = c.iter().sum::<f64>() / c.len() as f64;
    c.iter_mut().for_each(|v| *v -= mean);
    let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
    let scale = contrast.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm <= 1e-12 * scale.max(f64::MIN_POSITIVE) {
        return Err(Error::DegenerateContrast);
    }
    Ok(c.into_iter().map(|v| v / norm).collect())
}

/// Optimal contrast of the isotonic regression of all stage-1 means,
/// evaluated at the retained doses.
pub fn isotonic_contrast(stage1: &StageSummary, retained: &[f64], n2: &[usize]) -> Result<Vec<f64>> {
    let iso = isotonic_group_means(stage1.means(), stage1.n())?;
    let at: Vec<f64> = retained
        .iter()
        .map(|&d| stage1.index_of(d).map(|i| iso[i]).ok_or_else(|| Error::contract("retained dose is not a stage-1 dose")))
        .collect::<Result<_>>()?;
    optimal_contrast(&at, n2)
}

/// Stage-2 contrasts for the candidates at the retained doses.
pub fn adapt_models(
    stage1: &StageSummary,
    candidates: &[DoseResponseModel],
    stage1_contrasts: &ContrastSet,
    retained: &[f64],
    n2: &[usize],
    config: &AdaptationConfig,
) -> Result<AdaptationOutcome> {
    let m = candidates.len();
    if stage1_contrasts.m() != m || stage1_contrasts.doses() != stage1.doses() {
        return Err(Error::contract("stage-1 contrasts must match the candidates and stage-1 doses"));
    }
    if retained.len() != n2.len() || retained.len() < 2 || retained[0] != 0.0 {
        return Err(Error::contract("retained doses must start at placebo and match the stage-2 group sizes"));
    }
    let original = |model: &DoseResponseModel| optimal_contrast(&model.evaluate_at(retained), n2);

    let no_adapt = match config.model_policy {
        ModelPolicy::NoModelAdaptation => Some(Provenance::Original),
        ModelPolicy::RefitWithFallbacks => {
            let bounds = FitBounds::for_max_dose(stage1.doses()[stage1.k() - 1]);
            let line = fit(ModelFamily::Linear, stage1, &bounds)?;
            (line.theta()[1] < 0.0).then_some(Provenance::NegativeSlopeNoAdapt)
        }
    };

    let mut provenance = Vec::with_capacity(m);
    let mut fitted = vec![None; m];
    let mut degenerate = vec![false; m];
    let mut coeffs: Vec<Option<Vec<f64>>> = vec![None; m];

    if let Some(tag) = no_adapt {
        for (j, model) in candidates.iter().enumerate() {
            provenance.push(tag);
            coeffs[j] = original(model).ok();
        }
    } else {
        let bounds = FitBounds::for_max_dose(stage1.doses()[stage1.k() - 1]);
        let fits: Vec<_> = candidates.iter().map(|c| fit(c.family(), stage1, &bounds)).collect();
        let failed = |family: ModelFamily| {
            candidates.iter().zip(&fits).any(|(c, f)| c.family() == family && f.is_err())
        };
        let both_fail = failed(ModelFamily::Emax) && failed(ModelFamily::Logistic);
        for (j, f) in fits.into_iter().enumerate() {
            match f {
                Ok(model) => {
                    provenance.push(Provenance::Refit);
                    coeffs[j] = original(&model).ok();
                    fitted[j] = Some(model);
                }
                Err(_) if both_fail && candidates[j].family() == ModelFamily::Emax => {
                    provenance.push(Provenance::CarryOver);
                    coeffs[j] = carry_over(&stage1_contrasts.coeffs()[j], stage1.doses(), retained).ok();
                }
                Err(_) => {
                    provenance.push(Provenance::IsotonicFallback);
                    coeffs[j] = isotonic_contrast(stage1, retained, n2).ok();
                }
            }
        }
    }

    // A degenerate first choice (constant fitted profile, tied isotonic
    // blocks) carries the stage-1 contrast over; if even that is constant on
    // the retained doses, the original candidate and then a linear-in-dose
    // contrast are used.
    let mut out = Vec::with_capacity(m);
    for j in 0..m {
        let c = match coeffs[j].take() {
            Some(c) => c,
            None => {
                degenerate[j] = true;
                fitted[j] = None;
                if provenance[j] != Provenance::CarryOver {
                    provenance[j] = Provenance::CarryOver;
                }
                carry_over(&stage1_contrasts.coeffs()[j], stage1.doses(), retained)
                    .or_else(|_| original(&candidates[j]))
                    .or_else(|_| optimal_contrast(retained, n2))?
            }
        };
        out.push(c);
    }
    let set = ContrastSet::new(out, retained.to_vec(), n2.to_vec())?;
    Ok(AdaptationOutcome {
        retained_doses: retained.to_vec(),
        futility_stop: false,
        stage2_contrasts: Some(set),
        provenance,
        fitted,
        degenerate_fallback: degenerate,
    })
}

/// Dose decision followed by model adaptation with `total_n2` subjects
/// allocated equally over the retained doses.
pub fn adapt(
    stage1: &StageSummary,
    candidates: &[DoseResponseModel],
    stage1_contrasts: &ContrastSet,
    total_n2: usize,
    config: &AdaptationConfig,
) -> Result<AdaptationOutcome> {
    match adapt_doses(stage1, config)? {
        DoseDecision::FutilityStop => Ok(AdaptationOutcome::futility(vec![0.0], candidates.len())),
        DoseDecision::Retained(doses) => {
            let n2 = allocate(total_n2, doses.len())?;
            adapt_models(stage1, candidates, stage1_contrasts, &doses, &n2, config)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::catalog;
    use proptest::prelude::*;

    fn stage_one() -> StageSummary {
        StageSummary::with_sd(catalog::DOSES.to_vec(), vec![24; 5], vec![0.52, 0.47, 1.09, 1.70, 0.45], 1.58).unwrap()
    }

    fn stage_one_contrasts() -> ContrastSet {
        ContrastSet::from_models(&catalog::candidates(), &catalog::DOSES, &[24; 5]).unwrap()
    }

    fn summary(means: &[f64]) -> StageSummary {
        StageSummary::with_sd(catalog::DOSES.to_vec(), vec![24; 5], means.to_vec(), 1.0).unwrap()
    }

    fn retained(d: DoseDecision) -> Vec<f64> {
        match d {
            DoseDecision::Retained(v) => v,
            DoseDecision::FutilityStop => panic!("unexpected futility stop"),
        }
    }

    #[test]
    fn worked_example_keeps_three_doses() {
        let d = retained(adapt_doses(&stage_one(), &AdaptationConfig::default()).unwrap());
        assert_eq!(d, vec![0.0, 0.2, 0.6]);
    }

    #[test]
    fn increasing_means_keep_everything() {
        let d = retained(adapt_doses(&summary(&[0.0, 0.1, 0.2, 0.3, 0.4]), &AdaptationConfig::default()).unwrap());
        assert_eq!(d, catalog::DOSES.to_vec());
    }

    #[test]
    fn all_below_placebo_stops() {
        let cfg = AdaptationConfig::default();
        assert_eq!(adapt_doses(&summary(&[1.0, 0.9, 0.5, 0.8, 0.2]), &cfg).unwrap(), DoseDecision::FutilityStop);
        assert_eq!(adapt_doses(&summary(&[1.0, 0.9, 0.8, 0.7, 0.6]), &cfg).unwrap(), DoseDecision::FutilityStop);
    }

    #[test]
    fn standard_error_threshold_keeps_small_dips() {
        let cfg = AdaptationConfig {
            delta: Delta::StandardError,
            ..AdaptationConfig::default()
        };
        // SE of a difference with s = 1, n = 24 is 0.2887.
        let d = retained(adapt_doses(&summary(&[0.5, 0.3, 0.6, 0.9, 0.7]), &cfg).unwrap());
        assert_eq!(d, catalog::DOSES.to_vec());
    }

    #[test]
    fn allocation_puts_remainder_low() {
        assert_eq!(allocate(120, 3).unwrap(), vec![40, 40, 40]);
        assert_eq!(allocate(11, 3).unwrap(), vec![4, 4, 3]);
        assert!(allocate(2, 3).is_err());
    }

    #[test]
    fn worked_example_contrasts() {
        let out = adapt(&stage_one(), &catalog::candidates(), &stage_one_contrasts(), 120, &AdaptationConfig::default())
            .unwrap();
        assert_eq!(out.retained_doses, vec![0.0, 0.2, 0.6]);
        assert_eq!(
            out.provenance,
            vec![
                Provenance::Refit,
                Provenance::Refit,
                Provenance::Refit,
                Provenance::Refit,
                Provenance::IsotonicFallback
            ]
        );
        let set = out.stage2_contrasts.unwrap();
        let printed = [
            [-0.433, -0.383, 0.816],
            [-0.707, 0.0, 0.707],
            [-0.617, -0.154, 0.772],
            [-0.766, 0.137, 0.629],
            [-0.816, 0.408, 0.408],
        ];
        for (c, want) in set.coeffs().iter().zip(printed) {
            for (a, b) in c.iter().zip(want) {
                assert!((a - b).abs() < 2e-3, "{c:?} vs {want:?}");
            }
        }
    }

    #[test]
    fn noiseless_emax_refit_is_a_fixed_point() {
        let truth = catalog::emax();
        let s1 = StageSummary::with_sd(catalog::DOSES.to_vec(), vec![24; 5], truth.evaluate_at(&catalog::DOSES), 1.0)
            .unwrap();
        let doses = catalog::DOSES.to_vec();
        let out = adapt_models(&s1, &[truth.clone()], &stage_one_contrasts_for(&truth), &doses, &[24; 5], &AdaptationConfig::default())
            .unwrap();
        assert_eq!(out.provenance, vec![Provenance::Refit]);
        let want = optimal_contrast(&truth.evaluate_at(&doses), &[24; 5]).unwrap();
        for (a, b) in out.stage2_contrasts.unwrap().coeffs()[0].iter().zip(want) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    fn stage_one_contrasts_for(model: &DoseResponseModel) -> ContrastSet {
        ContrastSet::from_models(std::slice::from_ref(model), &catalog::DOSES, &[24; 5]).unwrap()
    }

    #[test]
    fn negative_slope_keeps_original_models() {
        let s1 = summary(&[0.5, 0.8, 0.4, 0.3, 0.1]);
        let doses = vec![0.0, 0.05];
        let out = adapt_models(&s1, &catalog::candidates(), &stage_one_contrasts(), &doses, &[30, 30], &AdaptationConfig::default())
            .unwrap();
        assert!(out.provenance.iter().all(|&p| p == Provenance::NegativeSlopeNoAdapt));
        assert!(out.fitted.iter().all(Option::is_none));
    }

    #[test]
    fn unchanged_doses_keep_linear_contrasts_without_adaptation() {
        let cfg = AdaptationConfig {
            model_policy: ModelPolicy::NoModelAdaptation,
            ..AdaptationConfig::default()
        };
        let s1 = stage_one();
        let c1 = stage_one_contrasts();
        let out = adapt_models(&s1, &catalog::candidates(), &c1, &catalog::DOSES, &[24; 5], &cfg).unwrap();
        let c2 = out.stage2_contrasts.unwrap();
        for j in [1, 2] {
            assert_eq!(c2.coeffs()[j], c1.coeffs()[j]);
        }
        // Refitting a linear-in-parameters model does not change its contrast either.
        let refit = adapt_models(&s1, &catalog::candidates(), &c1, &catalog::DOSES, &[24; 5], &AdaptationConfig::default())
            .unwrap();
        for j in [1, 2] {
            for (a, b) in refit.stage2_contrasts.as_ref().unwrap().coeffs()[j].iter().zip(&c1.coeffs()[j]) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn carry_over_recentres() {
        let c = carry_over(&[-0.64, -0.36, 0.06, 0.41, 0.53], &catalog::DOSES, &[0.0, 0.2, 0.6]).unwrap();
        assert!(c.iter().sum::<f64>().abs() < 1e-12);
        assert!((c.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(c[0] < c[1] && c[1] < c[2]);
        assert_eq!(carry_over(&[-1.0, 0.5, 0.5], &[0.0, 1.0, 2.0], &[1.0, 2.0]), Err(Error::DegenerateContrast));
    }

    #[test]
    fn both_nonlinear_failures_use_carry_over_for_emax() {
        // A jump right after placebo: both nonlinear fits pin ED50 at its lower bound.
        let s1 = summary(&[0.0, 1.0, 1.0, 1.0, 1.0]);
        let c1 = stage_one_contrasts();
        let out = adapt(&s1, &catalog::candidates(), &c1, 120, &AdaptationConfig::default()).unwrap();
        assert_eq!(
            out.provenance,
            vec![
                Provenance::CarryOver,
                Provenance::Refit,
                Provenance::Refit,
                Provenance::Refit,
                Provenance::IsotonicFallback
            ]
        );
        let set = out.stage2_contrasts.unwrap();
        for (a, b) in set.coeffs()[0].iter().zip(&c1.coeffs()[0]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(!out.degenerate_fallback[0]);
        // Isotonic means are (0,1,1,1,1): a placebo-versus-rest contrast.
        let iso = &set.coeffs()[4];
        assert!((iso[0] + (0.8f64).sqrt()).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn retained_doses_are_monotone_in_delta(
            means in prop::collection::vec(-1.0f64..1.0, 5),
            d1 in 0.0f64..0.5,
            extra in 0.0f64..0.5,
        ) {
            let s = summary(&means);
            let small = AdaptationConfig { delta: Delta::Value(d1), ..AdaptationConfig::default() };
            let large = AdaptationConfig { delta: Delta::Value(d1 + extra), ..AdaptationConfig::default() };
            let a = adapt_doses(&s, &small).unwrap();
            let b = adapt_doses(&s, &large).unwrap();
            let count = |d: &DoseDecision| match d { DoseDecision::Retained(v) => v.len(), DoseDecision::FutilityStop => 1 };
            prop_assert!(count(&b) >= count(&a));
            if let DoseDecision::Retained(v) = &a {
                prop_assert_eq!(v[0], 0.0);
                prop_assert!(v.len() >= 2);
                prop_assert!(v.windows(2).all(|w| w[0] < w[1]));
            }
        }

        #[test]
        fn strictly_decreasing_actives_stop(start in -1.0f64..1.0, steps in prop::collection::vec(0.01f64..0.5, 4)) {
            let mut means = vec![start];
            for s in &steps {
                let last = *means.last().unwrap();
                means.push(last - s);
            }
            prop_assert_eq!(adapt_doses(&summary(&means), &AdaptationConfig::default()).unwrap(), DoseDecision::FutilityStop);
        }
    }
}
