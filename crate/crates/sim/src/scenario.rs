use adaptpoc_core::adapt::AdaptationConfig;
use adaptpoc_core::gmct::{CrossStageMethod, P_FLOOR};
use adaptpoc_core::model::{catalog, DoseResponseModel};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::method::MethodSpec;

/// Accuracy settings for the per-replicate numerics. The defaults trade a
/// little precision in stage-2 p-values for a large speed-up; every p-value
/// stays valid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Numerics {
    /// Monte Carlo draws calibrating the fixed stage-1 (and one-stage) nulls.
    pub stage1_draws: usize,
    /// Draws calibrating each replicate's stage-2 null.
    pub stage2_draws: usize,
    /// Absolute error target of fixed-design box probabilities.
    pub qmc_tol: f64,
    /// Absolute error target of box probabilities that change every replicate.
    pub stage2_tol: f64,
    /// Absolute error target of the conditional rejection probability steps.
    pub crp_tol: f64,
    pub p_floor: f64,
}

impl Default for Numerics {
    fn default() -> Self {
        Self {
            stage1_draws: 200_000,
            stage2_draws: 10_000,
            qmc_tol: 1e-4,
            stage2_tol: 1e-3,
            crp_tol: 5e-4,
            p_floor: P_FLOOR,
        }
    }
}

impl Numerics {
    fn validate(&self) -> Result<()> {
        if self.stage1_draws == 0 || self.stage2_draws == 0 {
            return Err(SimError::Config("calibration draws must be positive".into()));
        }
        for (name, v) in [
            ("qmc_tol", self.qmc_tol),
            ("stage2_tol", self.stage2_tol),
            ("crp_tol", self.crp_tol),
        ] {
            if !(v > 0.0 && v < 0.1) {
                return Err(SimError::Config(format!("{name} must lie in (0, 0.1)")));
            }
        }
        if !(self.p_floor > 0.0 && self.p_floor < 1e-3) {
            return Err(SimError::Config("p_floor must lie in (0, 1e-3)".into()));
        }
        Ok(())
    }
}

fn default_cross_stage() -> CrossStageMethod {
    CrossStageMethod::InverseNormal
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationScenario {
    pub name: String,
    pub true_model: DoseResponseModel,
    pub candidates: Vec<DoseResponseModel>,
    /// Stage-1 doses, placebo first.
    pub doses: Vec<f64>,
    pub sigma: f64,
    /// Total stage-1 and stage-2 sample sizes.
    pub n1: usize,
    pub n2: usize,
    pub alpha: f64,
    pub methods: Vec<MethodSpec>,
    pub adaptation: AdaptationConfig,
    pub replications: usize,
    pub seed: u64,
    #[serde(default = "default_cross_stage")]
    pub cross_stage: CrossStageMethod,
    /// Also record the naive pooled test that ignores the adaptation.
    #[serde(default)]
    pub naive_pooling: bool,
    #[serde(default)]
    pub numerics: Numerics,
}

impl SimulationScenario {
    /// The published design: five doses, five candidate models, σ = 1.478,
    /// equal stage sizes, α = 0.05 and δ = 0.
    pub fn standard(true_model: &str, n_per_stage: usize, replications: usize, seed: u64) -> Result<Self> {
        let model = catalog::true_model(true_model)
            .ok_or_else(|| SimError::Config(format!("unknown true model `{true_model}`")))?;
        Ok(Self {
            name: format!("{true_model}_n{n_per_stage}"),
            true_model: model,
            candidates: catalog::candidates(),
            doses: catalog::DOSES.to_vec(),
            sigma: catalog::SIGMA,
            n1: n_per_stage,
            n2: n_per_stage,
            alpha: 0.05,
            methods: MethodSpec::study_set(),
            adaptation: AdaptationConfig::default(),
            replications,
            seed,
            cross_stage: CrossStageMethod::InverseNormal,
            naive_pooling: false,
            numerics: Numerics::default(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(SimError::Config(format!("scenario `{}`: {msg}", self.name)));
        if self.methods.is_empty() {
            return bad("at least one method is required");
        }
        if self.replications == 0 || self.replications >= u32::MAX as usize {
            return bad("replications must lie in [1, 2^32 - 1)");
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return bad("sigma must be positive and finite");
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad("alpha must lie in (0, 1)");
        }
        let k = self.doses.len();
        if k < 2 || self.doses[0] != 0.0 || self.doses.windows(2).any(|w| w[0] >= w[1]) {
            return bad("doses must start at 0 and increase strictly, with at least one active dose");
        }
        if self.n1 < 2 * k || self.n2 < 2 * k {
            return bad("each stage needs at least two subjects per stage-1 dose");
        }
        if self.candidates.is_empty() {
            return bad("at least one candidate model is required");
        }
        for m in self.candidates.iter().chain([&self.true_model]) {
            DoseResponseModel::new(m.family(), m.theta().to_vec())
                .map_err(|e| SimError::Config(format!("scenario `{}`: {e}", self.name)))?;
        }
        self.adaptation
            .validate()
            .map_err(|e| SimError::Config(format!("scenario `{}`: {e}", self.name)))?;
        self.numerics.validate()
    }
}
