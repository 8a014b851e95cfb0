use std::time::{Duration, Instant};

use adaptpoc_core::adapt::Provenance;
use rayon::prelude::*;
use statrs::distribution::{Beta, ContinuousCDF};

use crate::error::{Result, SimError};
use crate::method::MethodSpec;
use crate::scenario::SimulationScenario;
use crate::trial::{PreparedScenario, TrialRecord};

/// Largest tolerated fraction of failed replicates per method.
pub const FAILURE_BUDGET: f64 = 0.001;

/// Exact binomial 95% interval.
pub fn clopper_pearson(successes: usize, trials: usize) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let (x, n) = (successes as f64, trials as f64);
    let lo = if successes == 0 {
        0.0
    } else {
        Beta::new(x, n - x + 1.0).expect("positive shapes").inverse_cdf(0.025)
    };
    let hi = if successes == trials {
        1.0
    } else {
        Beta::new(x + 1.0, n - x).expect("positive shapes").inverse_cdf(0.975)
    };
    (lo.min(x / n), hi.max(x / n))
}

/// Which analysis a report row describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowKind {
    Method(MethodSpec),
    /// The naive pooled test that ignores the adaptation.
    NaivePooled,
}

/// Interim diagnostics averaged over replicates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptationStats {
    /// Mean number of stage-2 doses (placebo included) among continuing trials.
    pub mean_k2: f64,
    pub futility_rate: f64,
    /// Shares of stage-2 contrasts by origin, over continuing trials and models.
    pub refit_rate: f64,
    pub isotonic_rate: f64,
    pub carry_over_rate: f64,
    pub negative_slope_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub scenario: String,
    pub n1: usize,
    pub n2: usize,
    pub kind: RowKind,
    pub replications: usize,
    pub failed: usize,
    pub rejections: usize,
    /// Rejections over replicates that did not fail.
    pub rate: f64,
    pub ci: (f64, f64),
    /// Present for adaptive designs.
    pub adaptation: Option<AdaptationStats>,
}

#[derive(Debug)]
pub struct ScenarioRun {
    pub scenario: SimulationScenario,
    pub records: Vec<TrialRecord>,
    pub rows: Vec<ReportRow>,
    /// Kept out of every written file so that outputs stay deterministic.
    pub wall_time: Duration,
}

#[derive(Debug, Default)]
pub struct SimulationReport {
    pub runs: Vec<ScenarioRun>,
}

impl SimulationReport {
    pub fn rows(&self) -> impl Iterator<Item = &ReportRow> {
        self.runs.iter().flat_map(|r| r.rows.iter())
    }
}

fn adaptation_stats(records: &[TrialRecord]) -> Option<AdaptationStats> {
    let interims: Vec<_> = records.iter().filter_map(|r| r.interim.as_ref()).collect();
    if interims.is_empty() {
        return None;
    }
    let cont: Vec<_> = interims.iter().filter(|i| !i.futility).collect();
    let slots: usize = cont.iter().map(|i| i.provenance.len()).sum();
    let share = |p: Provenance| {
        if slots == 0 {
            0.0
        } else {
            cont.iter().flat_map(|i| i.provenance.iter()).filter(|&&q| q == p).count() as f64 / slots as f64
        }
    };
    Some(AdaptationStats {
        mean_k2: if cont.is_empty() {
            0.0
        } else {
            cont.iter().map(|i| i.k2 as f64).sum::<f64>() / cont.len() as f64
        },
        futility_rate: (interims.len() - cont.len()) as f64 / interims.len() as f64,
        refit_rate: share(Provenance::Refit),
        isotonic_rate: share(Provenance::IsotonicFallback),
        carry_over_rate: share(Provenance::CarryOver),
        negative_slope_rate: share(Provenance::NegativeSlopeNoAdapt),
    })
}

fn row(
    sc: &SimulationScenario,
    kind: RowKind,
    outcomes: impl Iterator<Item = std::result::Result<bool, String>>,
    adaptation: Option<AdaptationStats>,
) -> Result<ReportRow> {
    let (mut failed, mut rejections, mut decided, mut first) = (0, 0, 0, None);
    for o in outcomes {
        match o {
            Ok(r) => {
                decided += 1;
                rejections += usize::from(r);
            }
            Err(e) => {
                failed += 1;
                first.get_or_insert(e);
            }
        }
    }
    if failed as f64 > FAILURE_BUDGET * sc.replications as f64 {
        return Err(SimError::Aborted {
            scenario: sc.name.clone(),
            method: match kind {
                RowKind::Method(m) => m.to_string(),
                RowKind::NaivePooled => "naive pooled test".into(),
            },
            failed,
            replications: sc.replications,
            first: first.unwrap_or_default(),
        });
    }
    let rate = if decided == 0 { 0.0 } else { rejections as f64 / decided as f64 };
    Ok(ReportRow {
        scenario: sc.name.clone(),
        n1: sc.n1,
        n2: sc.n2,
        kind,
        replications: sc.replications,
        failed,
        rejections,
        rate,
        ci: clopper_pearson(rejections, decided),
        adaptation,
    })
}

/// Replicates one prepared scenario on the current rayon pool. Records come
/// back in replicate order whatever the thread count.
pub fn run_scenario(prepared: &PreparedScenario) -> Result<ScenarioRun> {
    let start = Instant::now();
    let sc = prepared.scenario();
    let records: Vec<TrialRecord> = (0..sc.replications as u64)
        .into_par_iter()
        .map(|r| prepared.run_trial(r))
        .collect();
    let adapt = adaptation_stats(&records);
    let mut rows = Vec::with_capacity(sc.methods.len() + 1);
    for (i, m) in sc.methods.iter().enumerate() {
        let stats = (m.design == crate::method::Design::Adaptive).then_some(adapt).flatten();
        let outcomes = records.iter().map(|r| r.results[i].as_ref().map(|x| x.reject).map_err(Clone::clone));
        rows.push(row(sc, RowKind::Method(*m), outcomes, stats)?);
    }
    if sc.naive_pooling {
        let outcomes = records.iter().map(|r| r.naive.clone().expect("requested"));
        rows.push(row(sc, RowKind::NaivePooled, outcomes, adapt)?);
    }
    Ok(ScenarioRun {
        scenario: sc.clone(),
        records,
        rows,
        wall_time: start.elapsed(),
    })
}

/// Runs every scenario with `threads` worker threads. The report does not
/// depend on the thread count.
pub fn run_study(scenarios: Vec<SimulationScenario>, threads: usize) -> Result<SimulationReport> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| SimError::ThreadPool(e.to_string()))?;
    pool.install(|| {
        let mut report = SimulationReport::default();
        for sc in scenarios {
            let prepared = PreparedScenario::new(sc)?;
            report.runs.push(run_scenario(&prepared)?);
        }
        Ok(report)
    })
}
