//! Plot- and table-ready CSV output.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Result, SimError};
use crate::method::{Design, MethodSpec, TestKind, VarianceMode};
use crate::scenario::SimulationScenario;
use crate::study::{ReportRow, RowKind, SimulationReport};

/// Name of the standard scenario for `model` at `n` subjects per stage.
pub fn scenario_name(model: &str, n: usize) -> String {
    format!("{model}_n{n}")
}

/// Null scenario plus one power scenario per true model, each at every
/// stage size, with the full comparison set of methods.
pub fn standard_study(models: &[&str], ns: &[usize], replications: usize, seed: u64) -> Result<Vec<SimulationScenario>> {
    let mut out = Vec::new();
    for model in std::iter::once("flat").chain(models.iter().copied()) {
        for &n in ns {
            out.push(SimulationScenario::standard(model, n, replications, seed)?);
        }
    }
    Ok(out)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

fn labels(kind: RowKind) -> (&'static str, &'static str, &'static str) {
    match kind {
        RowKind::Method(m) => (
            match m.test {
                TestKind::AgmctTippett => "agmct_t",
                TestKind::AgmctFisher => "agmct_f",
                TestKind::AgmctInverseNormal => "agmct_n",
                TestKind::Amct => "amct",
            },
            m.design.tag(),
            m.variance.tag(),
        ),
        RowKind::NaivePooled => ("naive_pooled_t", "adaptive", "known"),
    }
}

/// One row per (scenario, method): rate, exact 95% interval, failures and
/// interim diagnostics.
pub fn write_report_csv(path: &Path, report: &SimulationReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "scenario",
        "n1",
        "n2",
        "test",
        "design",
        "variance",
        "replications",
        "failed",
        "rejections",
        "rate",
        "ci_low",
        "ci_high",
        "mean_k2",
        "futility_rate",
        "refit_rate",
        "isotonic_rate",
        "carry_over_rate",
        "negative_slope_rate",
    ])?;
    for r in report.rows() {
        let (test, design, variance) = labels(r.kind);
        let a = r.adaptation;
        w.write_record([
            r.scenario.clone(),
            r.n1.to_string(),
            r.n2.to_string(),
            test.into(),
            design.into(),
            variance.into(),
            r.replications.to_string(),
            r.failed.to_string(),
            r.rejections.to_string(),
            format!("{:.6}", r.rate),
            format!("{:.6}", r.ci.0),
            format!("{:.6}", r.ci.1),
            opt(a.map(|s| s.mean_k2)),
            opt(a.map(|s| s.futility_rate)),
            opt(a.map(|s| s.refit_rate)),
            opt(a.map(|s| s.isotonic_rate)),
            opt(a.map(|s| s.carry_over_rate)),
            opt(a.map(|s| s.negative_slope_rate)),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn find<'a>(report: &'a SimulationReport, scenario: &str, m: MethodSpec) -> Option<&'a ReportRow> {
    report
        .rows()
        .find(|r| r.scenario == scenario && r.kind == RowKind::Method(m))
}

/// Null rejection rates laid out like the published type I error tables:
/// one block per stage size, adaptive and non-adaptive rows, one column per
/// test.
pub fn write_type1_table(path: &Path, report: &SimulationReport, ns: &[usize], variance: VarianceMode) -> Result<()> {
    let tests: Vec<TestKind> = TestKind::ALL
        .into_iter()
        .filter(|t| *t != TestKind::Amct || variance == VarianceMode::Known)
        .collect();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["n_per_stage".to_string(), "design".to_string()];
    header.extend(tests.iter().map(|t| t.label().to_string()));
    w.write_record(&header)?;
    for &n in ns {
        let name = scenario_name("flat", n);
        for design in [Design::Adaptive, Design::NonAdaptive] {
            let mut rec = vec![n.to_string(), design.tag().to_string()];
            for &t in &tests {
                let cell = find(report, &name, MethodSpec::new(t, design, variance));
                rec.push(cell.map(|r| format!("{:.4}", r.rate)).unwrap_or_default());
            }
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Power against stage size for one true model, one column per method.
pub fn write_power_curve(path: &Path, report: &SimulationReport, model: &str, ns: &[usize]) -> Result<()> {
    let methods: Vec<MethodSpec> = report
        .runs
        .iter()
        .find(|r| r.scenario.name == scenario_name(model, ns[0]))
        .map(|r| r.scenario.methods.clone())
        .ok_or_else(|| SimError::Config(format!("no scenario for true model `{model}`")))?;
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["n_per_stage".to_string()];
    header.extend(methods.iter().map(|m| m.to_string()));
    w.write_record(&header)?;
    for &n in ns {
        let name = scenario_name(model, n);
        let mut rec = vec![n.to_string()];
        for m in &methods {
            rec.push(find(report, &name, *m).map(|r| format!("{:.4}", r.rate)).unwrap_or_default());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub config_sha256: String,
    pub seed: u64,
    pub replications: Vec<usize>,
    pub scenarios: Vec<String>,
    pub files: Vec<String>,
}

impl Manifest {
    pub fn new(config_bytes: &[u8], seed: u64, report: &SimulationReport, files: &[PathBuf]) -> Self {
        Self {
            tool: "adaptpoc",
            version: env!("CARGO_PKG_VERSION"),
            config_sha256: sha256_hex(config_bytes),
            seed,
            replications: report.runs.iter().map(|r| r.scenario.replications).collect(),
            scenarios: report.runs.iter().map(|r| r.scenario.name.clone()).collect(),
            files: files
                .iter()
                .filter_map(|p| p.file_name().map(|f| f.to_string_lossy().into_owned()))
                .collect(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = File::create(path)?;
        serde_json::to_writer_pretty(&mut f, self)?;
        writeln!(f)?;
        Ok(())
    }
}
