use std::path::Path;
use std::process::Command;

use serde_json::{json, Value};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_adaptpoc"))
}

/// `n` values with the given mean whose squared deviations sum to
/// `(n - 1) * sd^2`; `n` must be even.
fn group(mean: f64, sd: f64, n: usize) -> Vec<f64> {
    let z = ((n - 1) as f64 / n as f64).sqrt() * sd;
    (0..n).map(|i| if i % 2 == 0 { mean + z } else { mean - z }).collect()
}

fn worked_example_csv() -> String {
    let mut out = String::from("stage,dose,response\n");
    for (d, m) in ["0", "0.05", "0.20", "0.6", "1"].iter().zip([0.52, 0.47, 1.09, 1.70, 0.45]) {
        for y in group(m, 1.58, 24) {
            out.push_str(&format!("1,{d},{y}\n"));
        }
    }
    for (d, m) in ["0.0", "0.2", "0.60"].iter().zip([-0.09, 0.77, 0.73]) {
        for y in group(m, 1.52, 40) {
            out.push_str(&format!("2,{d},{y}\n"));
        }
    }
    out
}

fn config(method: Value) -> Value {
    json!({
        "design": { "doses": [0.0, 0.05, 0.2, 0.6, 1.0], "alpha": 0.05, "sigma": 1.478 },
        "method": method,
    })
}

fn analyze(dir: &Path, data: &str, cfg: &Value) -> (i32, Option<Value>, String) {
    std::fs::write(dir.join("data.csv"), data).unwrap();
    std::fs::write(dir.join("config.json"), cfg.to_string()).unwrap();
    let out = bin()
        .args(["analyze", "--json", "--data"])
        .arg(dir.join("data.csv"))
        .arg("--config")
        .arg(dir.join("config.json"))
        .output()
        .unwrap();
    let report = serde_json::from_slice(&out.stdout).ok();
    (out.status.code().unwrap(), report, String::from_utf8_lossy(&out.stderr).into_owned())
}

#[test]
fn worked_example_tippett_inverse_normal() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(json!({ "test": "agmct_tippett", "design": "adaptive", "variance": "unknown" }));
    let (code, report, err) = analyze(dir.path(), &worked_example_csv(), &cfg);
    assert_eq!(code, 0, "{err}");
    let r = report.unwrap();
    assert_eq!(r["adaptation"]["retained_doses"], json!([0.0, 0.2, 0.6]));
    let p = r["overall"]["p"].as_f64().unwrap();
    assert!((p - 0.0001).abs() <= 1e-4, "overall p {p}");
    assert_eq!(r["reject"], json!(true));
}

#[test]
fn worked_example_amct_known_sigma() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(json!({ "test": "amct", "design": "adaptive", "variance": "known" }));
    let (code, report, err) = analyze(dir.path(), &worked_example_csv(), &cfg);
    assert_eq!(code, 0, "{err}");
    let r = report.unwrap();
    let u = r["crp"]["adaptive_critical"].as_f64().unwrap();
    assert!((u - 2.263).abs() <= 0.01, "adaptive critical value {u}");
    assert_eq!(r["reject"], json!(true));
}

#[test]
fn text_report_and_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(json!({ "test": "agmct_fisher", "design": "adaptive", "variance": "known" }));
    std::fs::write(dir.path().join("data.csv"), worked_example_csv()).unwrap();
    std::fs::write(dir.path().join("config.json"), cfg.to_string()).unwrap();
    let out = bin()
        .args(["analyze", "--data"])
        .arg(dir.path().join("data.csv"))
        .arg("--config")
        .arg(dir.path().join("config.json"))
        .arg("--out")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("overall p") && text.contains("decision"), "{text}");
    assert_eq!(std::fs::read_to_string(dir.path().join("out/report.txt")).unwrap(), text);
    let json: Value = serde_json::from_slice(&std::fs::read(dir.path().join("out/report.json")).unwrap()).unwrap();
    assert!(json["stage2"]["p_value"].is_number());
}

#[test]
fn constant_single_stage_responses_are_numerical_failures() {
    let dir = tempfile::tempdir().unwrap();
    let mut data = String::from("stage,dose,response\n");
    for d in ["0", "0.05", "0.2", "0.6", "1"] {
        for _ in 0..4 {
            data.push_str(&format!("1,{d},1.5\n"));
        }
    }
    let cfg = config(json!({ "test": "agmct_tippett", "design": "non_adaptive", "variance": "unknown" }));
    let (code, _, err) = analyze(dir.path(), &data, &cfg);
    assert_eq!(code, 3, "{err}");
    assert!(err.contains("variance"), "{err}");
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(json!({ "test": "agmct_tippett", "design": "adaptive", "variance": "known" }));
    let no_placebo: String = worked_example_csv().lines().filter(|l| !l.starts_with("1,0,")).map(|l| format!("{l}\n")).collect();
    assert_eq!(analyze(dir.path(), &no_placebo, &cfg).0, 2);
    let stray = format!("{}2,0.05,1.0\n", worked_example_csv());
    let (code, _, err) = analyze(dir.path(), &stray, &cfg);
    assert_eq!(code, 2, "{err}");
    let unknown_dose = format!("{}1,0.3,1.0\n", worked_example_csv());
    assert_eq!(analyze(dir.path(), &unknown_dose, &cfg).0, 2);
}

#[test]
fn unknown_config_keys_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let data = worked_example_csv();
    let mut cfg = config(json!({ "test": "amct", "design": "adaptive", "variance": "known" }));
    cfg["design"]["alhpa"] = json!(0.05);
    assert_eq!(analyze(dir.path(), &data, &cfg).0, 2);
    let mut cfg = config(json!({ "test": "amct", "design": "adaptive", "variance": "known" }));
    cfg["adaptation"] = json!({ "delta": 0.0, "extra": 1 });
    assert_eq!(analyze(dir.path(), &data, &cfg).0, 2);
    let cfg = config(json!({ "test": "amct", "design": "adaptive", "variance": "known", "seed": 3 }));
    assert_eq!(analyze(dir.path(), &data, &cfg).0, 2);
}

/// Re-analysing a dumped replicate reproduces the in-process decision and
/// p-values exactly, for every method.
#[test]
fn dump_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    for rep in 0..20u64 {
        let out = dir.path().join(format!("dump{rep}"));
        let status = bin()
            .args(["simulate", "--true-model", "emax2", "--n", "60", "--replications", "20", "--seed", "11"])
            .args(["--dump-one-replicate", &rep.to_string(), "--out"])
            .arg(&out)
            .status()
            .unwrap();
        assert!(status.success());
        let case = out.join(format!("replicate_{rep}")).join("emax2_n60");
        let decisions: Value = serde_json::from_slice(&std::fs::read(case.join("decisions.json")).unwrap()).unwrap();
        if decisions["agmct_t_adaptive_known"]["p2"].is_null() {
            continue;
        }
        for (name, want) in decisions.as_object().unwrap() {
            let r = bin()
                .args(["analyze", "--json", "--data"])
                .arg(case.join(format!("{name}.csv")))
                .arg("--config")
                .arg(case.join(format!("{name}.json")))
                .output()
                .unwrap();
            assert!(r.status.success(), "{name}: {}", String::from_utf8_lossy(&r.stderr));
            let got: Value = serde_json::from_slice(&r.stdout).unwrap();
            assert_eq!(got["reject"], want["reject"], "{name}");
            assert_eq!(got["stage1"]["p_value"], want["p1"], "{name}");
            let p2 = if got["stage2"].is_null() { Value::Null } else { got["stage2"]["p_value"].clone() };
            assert_eq!(p2, want["p2"], "{name}");
            let ce = if got["crp"].is_null() { Value::Null } else { got["crp"]["conditional_error"].clone() };
            assert_eq!(ce, want["conditional_error"], "{name}");
        }
        return;
    }
    panic!("no replicate continued to stage 2");
}

#[test]
fn simulate_writes_tables_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sim");
    let status = bin()
        .args(["simulate", "--replications", "1", "--seed", "5", "--n", "30", "--threads", "2"])
        .args(["--true-model", "flat", "--true-model", "step", "--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let mut rdr = csv::Reader::from_path(out.join("report.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 2 * 14);
    for r in &rows {
        let rate: f64 = r[9].parse().unwrap();
        assert!(rate == 0.0 || rate == 1.0);
    }
    for f in ["table_a1.csv", "table_a2.csv", "power_step.csv", "manifest.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let manifest: Value = serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], json!(5));
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn models_and_contrasts_commands() {
    let out = bin().args(["models", "list"]).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("double_logistic") && text.contains("linear_log"));
    let out = bin().args(["contrasts", "show"]).output().unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8(out.stdout).unwrap().contains("correlation"));
}
