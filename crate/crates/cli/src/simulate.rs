use std::path::{Path, PathBuf};
use std::time::Instant;

use adaptpoc_core::model::catalog;
use adaptpoc_sim::report::{write_power_curve, write_report_csv, write_type1_table, Manifest};
use adaptpoc_sim::{run_study, MethodSpec, PreparedScenario, SimulationScenario, VarianceMode};
use clap::Args;
use serde_json::{json, Map, Value};

use crate::config::{Config, SimulationConfig, TrueModelConfig};
use crate::data::write_records;
use crate::CliError;

#[derive(Args)]
pub struct SimulateArgs {
    /// JSON configuration; the standard design is used when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Worker threads (default: ADAPTPOC_THREADS or all cores).
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    replications: Option<usize>,
    /// Null and every catalog true model at 60 and 120 subjects per stage,
    /// with type I error tables and power curves.
    #[arg(long)]
    paper_tables: bool,
    /// True model by catalog name; repeatable.
    #[arg(long = "true-model")]
    true_models: Vec<String>,
    /// Subjects per stage; repeatable.
    #[arg(long = "n")]
    ns: Vec<usize>,
    /// Write the data, analysis configs and decisions of one replicate
    /// instead of running the study.
    #[arg(long)]
    dump_one_replicate: Option<u64>,
}

fn effective_config(args: &SimulateArgs) -> Result<Config, CliError> {
    let mut cfg = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            Config::parse(&text)?
        }
        None => Config::standard(),
    };
    let sim = cfg.simulation.get_or_insert_with(|| SimulationConfig {
        true_models: Vec::new(),
        n_per_stage: None,
        replications: 10_000,
        seed: 1,
        methods: None,
        cross_stage: None,
        naive_pooling: false,
        numerics: Default::default(),
    });
    if !args.true_models.is_empty() {
        sim.true_models = args.true_models.iter().cloned().map(TrueModelConfig::Named).collect();
    } else if args.paper_tables || sim.true_models.is_empty() {
        sim.true_models = std::iter::once("flat")
            .chain(if args.paper_tables { catalog::TRUE_MODEL_NAMES.to_vec() } else { Vec::new() })
            .map(|s| TrueModelConfig::Named(s.to_string()))
            .collect();
    }
    if !args.ns.is_empty() {
        sim.n_per_stage = Some(args.ns.clone());
    } else if args.paper_tables || (sim.n_per_stage.is_none() && args.config.is_none()) {
        sim.n_per_stage = Some(vec![60, 120]);
    }
    if let Some(r) = args.replications {
        sim.replications = r;
    }
    if let Some(s) = args.seed {
        sim.seed = s;
    }
    Ok(cfg)
}

fn slug(m: &MethodSpec) -> String {
    format!(
        "{}_{}_{}",
        m.test.label().to_lowercase().replace('-', "_"),
        m.design.tag(),
        m.variance.tag()
    )
}

fn opt(v: Option<f64>) -> Value {
    v.map_or(Value::Null, Value::from)
}

fn dump(scenarios: Vec<SimulationScenario>, replicate: u64, out: &Path) -> Result<(), CliError> {
    for sc in scenarios {
        if replicate >= sc.replications as u64 {
            return Err(CliError::Config(format!(
                "replicate {replicate} is outside the {} replicates of `{}`",
                sc.replications, sc.name
            )));
        }
        let dir = out.join(format!("replicate_{replicate}")).join(&sc.name);
        std::fs::create_dir_all(&dir)?;
        let prepared = PreparedScenario::new(sc)?;
        let record = prepared.run_trial(replicate);
        let mut decisions = Map::new();
        for (m, result) in prepared.scenario().methods.iter().zip(&record.results) {
            let name = slug(m);
            write_records(&dir.join(format!("{name}.csv")), &prepared.dump(replicate, m)?)?;
            let cfg = Config::for_plan(&prepared.plan(replicate, m));
            let text = serde_json::to_string_pretty(&cfg).map_err(|e| CliError::Io(e.to_string()))?;
            std::fs::write(dir.join(format!("{name}.json")), format!("{text}\n"))?;
            let entry = match result {
                Ok(r) => json!({
                    "reject": r.reject,
                    "p1": opt(r.p1),
                    "p2": opt(r.p2),
                    "conditional_error": opt(r.conditional_error),
                }),
                Err(e) => json!({ "error": e }),
            };
            decisions.insert(name, entry);
        }
        let text = serde_json::to_string_pretty(&Value::Object(decisions)).map_err(|e| CliError::Io(e.to_string()))?;
        std::fs::write(dir.join("decisions.json"), format!("{text}\n"))?;
    }
    Ok(())
}

pub fn run(args: &SimulateArgs, default_threads: usize) -> Result<(), CliError> {
    let cfg = effective_config(args)?;
    let scenarios = cfg.scenarios()?;
    std::fs::create_dir_all(&args.out)?;
    if let Some(rep) = args.dump_one_replicate {
        return dump(scenarios, rep, &args.out);
    }
    let sim = cfg.simulation.as_ref().expect("filled in");
    let ns: Vec<usize> = scenarios.iter().map(|s| s.n1).fold(Vec::new(), |mut v, n| {
        if !v.contains(&n) {
            v.push(n);
        }
        v
    });
    let mut names = Vec::new();
    for tm in &sim.true_models {
        names.push(tm.resolve()?.0);
    }
    let threads = args.threads.unwrap_or(default_threads);
    let start = Instant::now();
    let report = run_study(scenarios, threads)?;
    eprintln!("simulated in {:.1} s on {threads} threads", start.elapsed().as_secs_f64());

    let mut files = vec![args.out.join("report.csv")];
    write_report_csv(&files[0], &report)?;
    let equal = report.runs.iter().all(|r| r.scenario.n1 == r.scenario.n2);
    if equal && names.iter().any(|n| n == "flat") {
        for (file, variance) in [("table_a1.csv", VarianceMode::Known), ("table_a2.csv", VarianceMode::Unknown)] {
            let path = args.out.join(file);
            write_type1_table(&path, &report, &ns, variance)?;
            files.push(path);
        }
    }
    if equal {
        for name in names.iter().filter(|n| *n != "flat") {
            let path = args.out.join(format!("power_{name}.csv"));
            write_power_curve(&path, &report, name, &ns)?;
            files.push(path);
        }
    }
    let config_bytes = serde_json::to_vec(&cfg).map_err(|e| CliError::Io(e.to_string()))?;
    files.push(args.out.join("manifest.json"));
    Manifest::new(&config_bytes, sim.seed, &report, &files).write(&files[files.len() - 1])?;
    Ok(())
}
