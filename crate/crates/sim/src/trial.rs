//! One simulated trial: data generation, interim adaptation and every
//! requested test on the same data.

use std::collections::BTreeMap;

use adaptpoc_core::adapt::{adapt_doses, allocate, AdaptationOutcome, DoseDecision, Provenance};
use adaptpoc_core::contrast::ContrastSet;
use adaptpoc_core::crp::{amct_known_variance, amct_unknown_variance, CrpBase};
use adaptpoc_core::data::StageSummary;
use adaptpoc_core::gmct::{contrast_stats, contrast_z_stats, CombinationMethod, StageNull};
use adaptpoc_core::mvdist::Df;
use adaptpoc_core::rng::{stream_id, substream, Purpose};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::analysis::{
    agmct_decision, fixed_seed, interim, one_stage_critical, replicate_seed, stage2_nulls, variance, AnalysisPlan,
    Calibration,
};
use crate::error::{Result, SimError};
use crate::method::{Design, MethodSpec, TestKind, VarianceMode};
use crate::scenario::SimulationScenario;

/// Outcome of one method in one replicate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MethodResult {
    pub reject: bool,
    /// Stage-1 (or one-stage) p-value of a generalized test.
    pub p1: Option<f64>,
    /// Stage-2 p-value; absent after a futility stop.
    pub p2: Option<f64>,
    /// Conditional error of the AMCT.
    pub conditional_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub replicate: u64,
    /// One entry per scenario method, in order; `Err` holds the diagnostic.
    pub results: Vec<std::result::Result<MethodResult, String>>,
    /// Interim outcome, when some adaptive method was requested and the
    /// adaptation itself succeeded.
    pub interim: Option<InterimSummary>,
    /// Decision of the naive pooled test, when requested.
    pub naive: Option<std::result::Result<bool, String>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterimSummary {
    pub futility: bool,
    /// Retained doses including placebo (0 after a futility stop).
    pub k2: usize,
    pub provenance: Vec<Provenance>,
    pub degenerate: usize,
}

/// Row of a dumped dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub stage: u8,
    pub dose: f64,
    pub response: f64,
}

type Shared<T> = std::result::Result<T, String>;

fn shared<T>(r: adaptpoc_core::error::Result<T>) -> Shared<T> {
    r.map_err(|e| e.to_string())
}

/// A scenario with everything that does not depend on the data computed once.
#[derive(Debug)]
pub struct PreparedScenario {
    scenario: SimulationScenario,
    means: Vec<f64>,
    n1: Vec<usize>,
    /// Extra subjects per dose that make up the one-stage comparator.
    extension: Vec<usize>,
    set1: ContrastSet,
    set_all: ContrastSet,
    calibration_seed: u64,
    /// Stage-1 nulls of the adaptive generalized tests.
    stage1_nulls: BTreeMap<(VarianceMode, CombinationMethod), StageNull>,
    /// One-stage nulls of the non-adaptive generalized tests.
    one_stage_nulls: BTreeMap<(VarianceMode, CombinationMethod), StageNull>,
    crp_bases: BTreeMap<VarianceMode, CrpBase>,
    one_stage_critical: BTreeMap<VarianceMode, f64>,
}

impl PreparedScenario {
    pub fn new(scenario: SimulationScenario) -> Result<Self> {
        scenario.validate()?;
        let k = scenario.doses.len();
        let n1 = allocate(scenario.n1, k)?;
        let total = allocate(scenario.n1 + scenario.n2, k)?;
        let extension: Vec<usize> = total.iter().zip(&n1).map(|(t, a)| t - a).collect();
        let set1 = ContrastSet::from_models(&scenario.candidates, &scenario.doses, &n1)?;
        let set_all = ContrastSet::from_models(&scenario.candidates, &scenario.doses, &total)?;
        let means = scenario.true_model.evaluate_at(&scenario.doses);
        let mut prepared = Self {
            means,
            n1,
            extension,
            set1,
            set_all,
            calibration_seed: fixed_seed(scenario.seed),
            stage1_nulls: BTreeMap::new(),
            one_stage_nulls: BTreeMap::new(),
            crp_bases: BTreeMap::new(),
            one_stage_critical: BTreeMap::new(),
            scenario,
        };
        prepared.prepare_nulls()?;
        Ok(prepared)
    }

    pub fn scenario(&self) -> &SimulationScenario {
        &self.scenario
    }

    /// True group means at the stage-1 doses.
    pub fn means(&self) -> &[f64] {
        &self.means
    }

    fn calibration(&self, replicate: u64) -> Calibration {
        Calibration {
            numerics: self.scenario.numerics,
            stage1_seed: self.calibration_seed,
            stage2_seed: replicate_seed(self.scenario.seed, replicate),
        }
    }

    fn df(&self, mode: VarianceMode, total: usize) -> Result<Df> {
        Ok(match mode {
            VarianceMode::Known => Df::Infinite,
            VarianceMode::Unknown => Df::from_count(total - self.scenario.doses.len())?,
        })
    }

    fn prepare_nulls(&mut self) -> Result<()> {
        let cal = self.calibration(0);
        let opts = cal.fixed_options();
        let methods = self.scenario.methods.clone();
        for mode in [VarianceMode::Known, VarianceMode::Unknown] {
            for design in [Design::Adaptive, Design::NonAdaptive] {
                let combos: Vec<CombinationMethod> = CombinationMethod::ALL
                    .into_iter()
                    .filter(|&c| methods.contains(&MethodSpec::new(TestKind::from_combination(c), design, mode)))
                    .collect();
                if combos.is_empty() {
                    continue;
                }
                let (set, total, target) = match design {
                    Design::Adaptive => (&self.set1, self.scenario.n1, &mut self.stage1_nulls),
                    Design::NonAdaptive => (
                        &self.set_all,
                        self.scenario.n1 + self.scenario.n2,
                        &mut self.one_stage_nulls,
                    ),
                };
                let df = match mode {
                    VarianceMode::Known => Df::Infinite,
                    VarianceMode::Unknown => Df::from_count(total - self.scenario.doses.len())?,
                };
                for null in StageNull::prepare_many(set.corr(), df, &combos, &opts)? {
                    target.insert((mode, null.method()), null);
                }
            }
            if methods.contains(&MethodSpec::new(TestKind::Amct, Design::Adaptive, mode)) {
                let crp = cal.crp_options();
                let base = match mode {
                    VarianceMode::Known => CrpBase::known(self.set1.clone(), self.scenario.alpha, &crp)?,
                    VarianceMode::Unknown => {
                        let nu1 = self.scenario.n1 - self.scenario.doses.len();
                        CrpBase::unknown(self.set1.clone(), nu1, self.scenario.alpha, &crp)?
                    }
                };
                self.crp_bases.insert(mode, base);
            }
            if methods.contains(&MethodSpec::new(TestKind::Amct, Design::NonAdaptive, mode)) {
                let df = self.df(mode, self.scenario.n1 + self.scenario.n2)?;
                let crit = one_stage_critical(&self.set_all, df, self.scenario.alpha, &cal.fixed_qmc())?;
                self.one_stage_critical.insert(mode, crit);
            }
        }
        Ok(())
    }

    fn draw(&self, replicate: u64, purpose: Purpose, group: usize, n: usize) -> Vec<f64> {
        let mut rng = substream(self.scenario.seed, stream_id(replicate, purpose, group as u32));
        let (mu, sigma) = (self.means[group], self.scenario.sigma);
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                mu + sigma * z
            })
            .collect()
    }

    /// Stage-1 responses per dose.
    fn stage1_groups(&self, replicate: u64) -> Vec<Vec<f64>> {
        (0..self.n1.len())
            .map(|i| self.draw(replicate, Purpose::Stage1, i, self.n1[i]))
            .collect()
    }

    /// One-stage comparator responses: the stage-1 responses followed by an
    /// extension from its own stream.
    fn one_stage_groups(&self, replicate: u64, stage1: &[Vec<f64>]) -> Vec<Vec<f64>> {
        stage1
            .iter()
            .enumerate()
            .map(|(i, g)| {
                let mut all = g.clone();
                all.extend(self.draw(replicate, Purpose::Extension, i, self.extension[i]));
                all
            })
            .collect()
    }

    /// Stage-2 responses at the retained doses.
    fn stage2_groups(&self, replicate: u64, retained: &[f64], n2: &[usize]) -> Vec<Vec<f64>> {
        retained
            .iter()
            .zip(n2)
            .map(|(d, &n)| {
                let i = self.scenario.doses.iter().position(|x| x == d).expect("retained dose from the design");
                self.draw(replicate, Purpose::Stage2, i, n)
            })
            .collect()
    }

    fn needs(&self, pred: impl Fn(&MethodSpec) -> bool) -> bool {
        self.scenario.methods.iter().any(pred)
    }

    /// Interim outcome and stage-2 sizes for the generated stage-1 data.
    fn adapt(&self, s1: &StageSummary) -> adaptpoc_core::error::Result<(AdaptationOutcome, Vec<usize>)> {
        let cfg = &self.scenario.adaptation;
        let n2 = match adapt_doses(s1, cfg)? {
            DoseDecision::FutilityStop => Vec::new(),
            DoseDecision::Retained(d) => allocate(self.scenario.n2, d.len())?,
        };
        let outcome = interim(s1, &self.scenario.candidates, &self.set1, Some(&n2), cfg).map_err(|e| match e {
            SimError::Core(c) => c,
            other => adaptpoc_core::error::Error::NumericalDomain(other.to_string()),
        })?;
        Ok((outcome, n2))
    }

    /// Runs every method of the scenario on replicate `replicate`.
    pub fn run_trial(&self, replicate: u64) -> TrialRecord {
        let sc = &self.scenario;
        let cal = self.calibration(replicate);
        let stage1 = self.stage1_groups(replicate);
        let s1 = shared(StageSummary::from_groups(sc.doses.clone(), &stage1));
        let all = self
            .needs(|m| m.design == Design::NonAdaptive)
            .then(|| shared(StageSummary::from_groups(sc.doses.clone(), &self.one_stage_groups(replicate, &stage1))));

        let adaptive = self.needs(|m| m.design == Design::Adaptive) || sc.naive_pooling;
        let adapted = if adaptive {
            Some(s1.clone().and_then(|s| shared(self.adapt(&s))))
        } else {
            None
        };
        let s2: Option<Shared<Option<StageSummary>>> = adapted.as_ref().map(|a| {
            let (outcome, n2) = a.as_ref().map_err(Clone::clone)?;
            if outcome.futility_stop {
                return Ok(None);
            }
            let groups = self.stage2_groups(replicate, &outcome.retained_doses, n2);
            shared(StageSummary::from_groups(outcome.retained_doses.clone(), &groups)).map(Some)
        });

        // Stage-2 p-values of the adaptive generalized tests, by variance mode.
        let mut p2: BTreeMap<(VarianceMode, CombinationMethod), Shared<Option<f64>>> = BTreeMap::new();
        for mode in [VarianceMode::Known, VarianceMode::Unknown] {
            let combos: Vec<CombinationMethod> = self
                .stage1_nulls
                .keys()
                .filter(|(m, _)| *m == mode)
                .map(|(_, c)| *c)
                .collect();
            if combos.is_empty() {
                continue;
            }
            let computed: Shared<Vec<Option<f64>>> = (|| {
                let s2 = s2.as_ref().expect("adaptive").as_ref().map_err(Clone::clone)?;
                let Some(s2) = s2 else {
                    return Ok(vec![None; combos.len()]);
                };
                let (outcome, _) = adapted.as_ref().expect("adaptive").as_ref().map_err(Clone::clone)?;
                let set2 = outcome.stage2_contrasts.as_ref().expect("continued");
                let var = variance(mode, Some(sc.sigma)).map_err(|e| e.to_string())?;
                let (stats, df) = shared(contrast_stats(s2, set2, var))?;
                let nulls = stage2_nulls(set2, df, &combos, &cal).map_err(|e| e.to_string())?;
                nulls.iter().map(|n| shared(n.p_value(&stats)).map(Some)).collect()
            })();
            for (i, c) in combos.iter().enumerate() {
                p2.insert((mode, *c), computed.as_ref().map(|v| v[i]).map_err(Clone::clone));
            }
        }

        let results = sc
            .methods
            .iter()
            .map(|m| self.evaluate(m, &cal, &s1, all.as_ref(), adapted.as_ref(), s2.as_ref(), &p2))
            .collect();

        let interim = adapted.as_ref().and_then(|a| a.as_ref().ok()).map(|(o, _)| InterimSummary {
            futility: o.futility_stop,
            k2: if o.futility_stop { 0 } else { o.retained_doses.len() },
            provenance: if o.futility_stop { Vec::new() } else { o.provenance.clone() },
            degenerate: o.degenerate_fallback.iter().filter(|d| **d).count(),
        });
        let naive = sc
            .naive_pooling
            .then(|| self.naive_pooled(&cal, &stage1, adapted.as_ref().expect("adaptive"), replicate));
        TrialRecord {
            replicate,
            results,
            interim,
            naive,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn evaluate(
        &self,
        m: &MethodSpec,
        cal: &Calibration,
        s1: &Shared<StageSummary>,
        all: Option<&Shared<StageSummary>>,
        adapted: Option<&Shared<(AdaptationOutcome, Vec<usize>)>>,
        s2: Option<&Shared<Option<StageSummary>>>,
        p2: &BTreeMap<(VarianceMode, CombinationMethod), Shared<Option<f64>>>,
    ) -> std::result::Result<MethodResult, String> {
        let sc = &self.scenario;
        let var = variance(m.variance, Some(sc.sigma)).map_err(|e| e.to_string())?;
        match (m.design, m.test.combination()) {
            (Design::NonAdaptive, combo) => {
                let data = all.expect("one-stage data").as_ref().map_err(Clone::clone)?;
                let (stats, _) = shared(contrast_stats(data, &self.set_all, var))?;
                match combo {
                    Some(c) => {
                        let p = shared(self.one_stage_nulls[&(m.variance, c)].p_value(&stats))?;
                        Ok(MethodResult {
                            reject: p <= sc.alpha,
                            p1: Some(p),
                            p2: None,
                            conditional_error: None,
                        })
                    }
                    None => {
                        let crit = self.one_stage_critical[&m.variance];
                        Ok(MethodResult {
                            reject: stats.iter().cloned().fold(f64::NEG_INFINITY, f64::max) >= crit,
                            p1: None,
                            p2: None,
                            conditional_error: None,
                        })
                    }
                }
            }
            (Design::Adaptive, Some(c)) => {
                let s1 = s1.as_ref().map_err(Clone::clone)?;
                let (stats1, _) = shared(contrast_stats(s1, &self.set1, var))?;
                let p1 = shared(self.stage1_nulls[&(m.variance, c)].p_value(&stats1))?;
                let p2 = p2[&(m.variance, c)].clone()?;
                let (_, reject) = agmct_decision(p1, p2, sc.cross_stage, sc.numerics.p_floor, sc.alpha)
                    .map_err(|e| e.to_string())?;
                Ok(MethodResult {
                    reject,
                    p1: Some(p1),
                    p2,
                    conditional_error: None,
                })
            }
            (Design::Adaptive, None) => {
                let s1 = s1.as_ref().map_err(Clone::clone)?;
                let (outcome, _) = adapted.expect("adaptive").as_ref().map_err(Clone::clone)?;
                let s2 = s2.expect("adaptive").as_ref().map_err(Clone::clone)?;
                let base = &self.crp_bases[&m.variance];
                let opts = cal.crp_options();
                let r = match m.variance {
                    VarianceMode::Known => amct_known_variance(base, s1, s2.as_ref(), outcome, sc.sigma, &opts),
                    VarianceMode::Unknown => amct_unknown_variance(base, s1, s2.as_ref(), outcome, sc.sigma, &opts),
                };
                let r = shared(r)?;
                Ok(MethodResult {
                    reject: r.reject,
                    p1: None,
                    p2: None,
                    conditional_error: Some(r.state.conditional_error),
                })
            }
        }
    }

    /// The invalid analysis that ignores the interim look: stage-1 and stage-2
    /// responses at the retained doses are pooled and tested once with the
    /// adapted contrasts and σ known. Stops for futility never reject.
    fn naive_pooled(
        &self,
        cal: &Calibration,
        stage1: &[Vec<f64>],
        adapted: &Shared<(AdaptationOutcome, Vec<usize>)>,
        replicate: u64,
    ) -> std::result::Result<bool, String> {
        let (outcome, n2) = adapted.as_ref().map_err(Clone::clone)?;
        if outcome.futility_stop {
            return Ok(false);
        }
        let stage2 = self.stage2_groups(replicate, &outcome.retained_doses, n2);
        let groups: Vec<Vec<f64>> = outcome
            .retained_doses
            .iter()
            .zip(stage2)
            .map(|(d, g2)| {
                let i = self.scenario.doses.iter().position(|x| x == d).expect("design dose");
                let mut g = stage1[i].clone();
                g.extend(g2);
                g
            })
            .collect();
        let data = shared(StageSummary::from_groups(outcome.retained_doses.clone(), &groups))?;
        let coeffs = outcome.stage2_contrasts.as_ref().expect("continued").coeffs().to_vec();
        let set = shared(ContrastSet::new(coeffs, data.doses().to_vec(), data.n().to_vec()))?;
        let z = shared(contrast_z_stats(&data, &set, self.scenario.sigma))?;
        let null = shared(StageNull::prepare(
            set.corr(),
            Df::Infinite,
            CombinationMethod::Tippett,
            &cal.stage2_options(),
        ))?;
        Ok(shared(null.p_value(&z))? <= self.scenario.alpha)
    }

    /// Subject-level data of one replicate as analysed by `method`: two
    /// stages for adaptive designs, a single stage of size `N1 + N2`
    /// otherwise.
    pub fn dump(&self, replicate: u64, method: &MethodSpec) -> Result<Vec<SubjectRecord>> {
        let doses = &self.scenario.doses;
        let stage1 = self.stage1_groups(replicate);
        let rows = |stage: u8, doses: &[f64], groups: &[Vec<f64>]| -> Vec<SubjectRecord> {
            doses
                .iter()
                .zip(groups)
                .flat_map(|(&dose, g)| g.iter().map(move |&response| SubjectRecord { stage, dose, response }))
                .collect()
        };
        if method.design == Design::NonAdaptive {
            return Ok(rows(1, doses, &self.one_stage_groups(replicate, &stage1)));
        }
        let mut out = rows(1, doses, &stage1);
        let s1 = StageSummary::from_groups(doses.clone(), &stage1)?;
        let (outcome, n2) = self.adapt(&s1)?;
        if !outcome.futility_stop {
            let g2 = self.stage2_groups(replicate, &outcome.retained_doses, &n2);
            out.extend(rows(2, &outcome.retained_doses, &g2));
        }
        Ok(out)
    }

    /// The analysis plan that reproduces `method` on replicate `replicate`.
    pub fn plan(&self, replicate: u64, method: &MethodSpec) -> AnalysisPlan {
        AnalysisPlan {
            doses: self.scenario.doses.clone(),
            candidates: self.scenario.candidates.clone(),
            alpha: self.scenario.alpha,
            adaptation: self.scenario.adaptation,
            method: *method,
            cross_stage: self.scenario.cross_stage,
            sigma: Some(self.scenario.sigma),
            calibration: self.calibration(replicate),
        }
    }
}
