//! Replicated simulation of two-stage adaptive proof-of-concept trials.
//!
//! Every random number is drawn from a stream addressed by the scenario
//! seed, the replicate index and the purpose of the draw, so reports are
//! bit-identical for any number of threads.

pub mod analysis;
pub mod error;
pub mod method;
pub mod report;
pub mod scenario;
pub mod study;
pub mod trial;

pub use analysis::{analyze, AnalysisPlan, AnalysisReport, Calibration};
pub use error::{Result, SimError};
pub use method::{Design, MethodSpec, TestKind, VarianceMode};
pub use scenario::{Numerics, SimulationScenario};
pub use study::{run_scenario, run_study, ReportRow, RowKind, ScenarioRun, SimulationReport};
pub use trial::{MethodResult, PreparedScenario, SubjectRecord, TrialRecord};
