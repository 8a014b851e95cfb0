//! The JSON configuration document. Unknown keys are rejected everywhere.

use adaptpoc_core::adapt::AdaptationConfig;
use adaptpoc_core::gmct::CrossStageMethod;
use adaptpoc_core::model::{catalog, DoseResponseModel, ModelFamily};
use adaptpoc_sim::analysis::Calibration;
use adaptpoc_sim::report::scenario_name;
use adaptpoc_sim::{AnalysisPlan, Design, MethodSpec, Numerics, SimulationScenario, TestKind, VarianceMode};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub design: DesignConfig,
    /// Defaults to the standard five candidate models.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidates: Option<Vec<ModelConfig>>,
    #[serde(default)]
    pub adaptation: AdaptationConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<MethodConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulation: Option<SimulationConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignConfig {
    pub doses: Vec<f64>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Known σ, or the reference σ of the unknown-variance AMCT.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    /// Planned total sample sizes per stage (simulation and contrast display).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n1: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n2: Option<usize>,
}

fn default_alpha() -> f64 {
    0.05
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub family: ModelFamily,
    pub theta: Vec<f64>,
}

impl ModelConfig {
    pub fn build(&self) -> Result<DoseResponseModel, CliError> {
        DoseResponseModel::new(self.family, self.theta.clone()).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn from_model(m: &DoseResponseModel) -> Self {
        Self {
            family: m.family(),
            theta: m.theta().to_vec(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodConfig {
    pub test: TestKind,
    pub design: Design,
    pub variance: VarianceMode,
    #[serde(default = "default_cross")]
    pub cross_stage: CrossStageMethod,
    #[serde(default = "default_calibration")]
    pub calibration: Calibration,
}

impl MethodConfig {
    pub fn spec(&self) -> MethodSpec {
        MethodSpec::new(self.test, self.design, self.variance)
    }
}

fn default_cross() -> CrossStageMethod {
    CrossStageMethod::InverseNormal
}

fn default_calibration() -> Calibration {
    Calibration {
        numerics: Numerics {
            stage2_draws: 200_000,
            stage2_tol: 1e-4,
            crp_tol: 2e-5,
            ..Numerics::default()
        },
        stage1_seed: 1,
        stage2_seed: 2,
    }
}

/// A true model by catalog name or given explicitly.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TrueModelConfig {
    Named(String),
    Custom(NamedModel),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedModel {
    pub name: String,
    pub family: ModelFamily,
    pub theta: Vec<f64>,
}

impl TrueModelConfig {
    pub fn resolve(&self) -> Result<(String, DoseResponseModel), CliError> {
        match self {
            TrueModelConfig::Named(name) => catalog::true_model(name)
                .map(|m| (name.clone(), m))
                .ok_or_else(|| CliError::Config(format!("unknown true model `{name}`"))),
            TrueModelConfig::Custom(m) => Ok((
                m.name.clone(),
                DoseResponseModel::new(m.family, m.theta.clone()).map_err(|e| CliError::Config(e.to_string()))?,
            )),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub true_models: Vec<TrueModelConfig>,
    /// Equal stage sizes to sweep; defaults to the design's `n1` and `n2`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_per_stage: Option<Vec<usize>>,
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default)]
    pub seed: u64,
    /// Defaults to the full comparison set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub methods: Option<Vec<MethodSpec>>,
    #[serde(default)]
    pub cross_stage: Option<CrossStageMethod>,
    #[serde(default)]
    pub naive_pooling: bool,
    #[serde(default)]
    pub numerics: Numerics,
}

fn default_replications() -> usize {
    10_000
}

impl Config {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Config = serde_json::from_str(text).map_err(|e| CliError::Config(format!("config: {e}")))?;
        if cfg.design.doses.is_empty() {
            return Err(CliError::Config("design.doses must not be empty".into()));
        }
        Ok(cfg)
    }

    /// The standard design without method or simulation sections.
    pub fn standard() -> Self {
        Self {
            design: DesignConfig {
                doses: catalog::DOSES.to_vec(),
                alpha: 0.05,
                sigma: Some(catalog::SIGMA),
                n1: Some(120),
                n2: Some(120),
            },
            candidates: None,
            adaptation: AdaptationConfig::default(),
            method: None,
            simulation: None,
        }
    }

    pub fn candidates(&self) -> Result<Vec<DoseResponseModel>, CliError> {
        match &self.candidates {
            None => Ok(catalog::candidates()),
            Some(list) if list.is_empty() => Err(CliError::Config("candidates must not be empty".into())),
            Some(list) => list.iter().map(ModelConfig::build).collect(),
        }
    }

    pub fn plan(&self) -> Result<AnalysisPlan, CliError> {
        let method = self
            .method
            .as_ref()
            .ok_or_else(|| CliError::Config("the `method` section is required for analysis".into()))?;
        Ok(AnalysisPlan {
            doses: self.design.doses.clone(),
            candidates: self.candidates()?,
            alpha: self.design.alpha,
            adaptation: self.adaptation,
            method: method.spec(),
            cross_stage: method.cross_stage,
            sigma: self.design.sigma,
            calibration: method.calibration,
        })
    }

    pub fn scenarios(&self) -> Result<Vec<SimulationScenario>, CliError> {
        let sim = self
            .simulation
            .as_ref()
            .ok_or_else(|| CliError::Config("the `simulation` section is required".into()))?;
        let sizes: Vec<(usize, usize)> = match &sim.n_per_stage {
            Some(ns) => ns.iter().map(|&n| (n, n)).collect(),
            None => match (self.design.n1, self.design.n2) {
                (Some(a), Some(b)) => vec![(a, b)],
                _ => {
                    return Err(CliError::Config(
                        "give simulation.n_per_stage or both design.n1 and design.n2".into(),
                    ))
                }
            },
        };
        let sigma = self
            .design
            .sigma
            .ok_or_else(|| CliError::Config("simulation needs design.sigma".into()))?;
        let candidates = self.candidates()?;
        let mut out = Vec::new();
        for tm in &sim.true_models {
            let (name, model) = tm.resolve()?;
            for &(n1, n2) in &sizes {
                let sc = SimulationScenario {
                    name: if n1 == n2 {
                        scenario_name(&name, n1)
                    } else {
                        format!("{name}_n{n1}_{n2}")
                    },
                    true_model: model.clone(),
                    candidates: candidates.clone(),
                    doses: self.design.doses.clone(),
                    sigma,
                    n1,
                    n2,
                    alpha: self.design.alpha,
                    methods: sim.methods.clone().unwrap_or_else(MethodSpec::study_set),
                    adaptation: self.adaptation,
                    replications: sim.replications,
                    seed: sim.seed,
                    cross_stage: sim.cross_stage.unwrap_or(CrossStageMethod::InverseNormal),
                    naive_pooling: sim.naive_pooling,
                    numerics: sim.numerics,
                };
                sc.validate()?;
                out.push(sc);
            }
        }
        if out.is_empty() {
            return Err(CliError::Config("simulation.true_models must not be empty".into()));
        }
        Ok(out)
    }

    /// A configuration that re-analyses one dumped replicate with `plan`.
    pub fn for_plan(plan: &AnalysisPlan) -> Self {
        Self {
            design: DesignConfig {
                doses: plan.doses.clone(),
                alpha: plan.alpha,
                sigma: plan.sigma,
                n1: None,
                n2: None,
            },
            candidates: Some(plan.candidates.iter().map(ModelConfig::from_model).collect()),
            adaptation: plan.adaptation,
            method: Some(MethodConfig {
                test: plan.method.test,
                design: plan.method.design,
                variance: plan.method.variance,
                cross_stage: plan.cross_stage,
                calibration: plan.calibration,
            }),
            simulation: None,
        }
    }
}
