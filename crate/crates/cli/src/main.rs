mod config;
mod data;
mod simulate;
mod text;

use std::path::PathBuf;
use std::process::ExitCode;

use adaptpoc_core::adapt::allocate;
use adaptpoc_core::contrast::ContrastSet;
use adaptpoc_core::model::catalog;
use adaptpoc_sim::{analyze, SimError};
use clap::{Args, Parser, Subcommand};

use config::Config;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Numerical(String),
    Io(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Io(_) => 1,
            CliError::Config(_) | CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl From<adaptpoc_core::error::Error> for CliError {
    fn from(e: adaptpoc_core::error::Error) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else {
            CliError::Data(e.to_string())
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Core(c) => c.into(),
            e if e.is_numerical() => CliError::Numerical(e.to_string()),
            SimError::Config(m) => CliError::Config(m),
            e => CliError::Io(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "adaptpoc", version, about = "Adaptive two-stage proof-of-concept dose-response tests")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Analyze a one- or two-stage dataset.
    Analyze(AnalyzeArgs),
    /// Run a simulation study.
    Simulate(simulate::SimulateArgs),
    /// Built-in dose-response models.
    Models {
        #[command(subcommand)]
        command: ModelsCommand,
    },
    /// Optimal contrasts of a design.
    Contrasts {
        #[command(subcommand)]
        command: ContrastsCommand,
    },
}

#[derive(Subcommand)]
enum ModelsCommand {
    /// List candidate and true models.
    List,
}

#[derive(Subcommand)]
enum ContrastsCommand {
    /// Print contrast coefficients and their correlation matrix.
    Show {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Args)]
struct AnalyzeArgs {
    /// CSV with header `stage,dose,response`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: PathBuf,
    /// Directory for `report.json` and `report.txt`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print JSON instead of text.
    #[arg(long)]
    json: bool,
}

fn read_config(path: &std::path::Path) -> Result<(Config, Vec<u8>), CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let text = std::str::from_utf8(&bytes).map_err(|e| CliError::Config(e.to_string()))?;
    Ok((Config::parse(text)?, bytes))
}

fn cmd_analyze(args: &AnalyzeArgs) -> Result<(), CliError> {
    let (cfg, _) = read_config(&args.config)?;
    let plan = cfg.plan()?;
    let file = std::fs::File::open(&args.data).map_err(|e| CliError::Data(format!("{}: {e}", args.data.display())))?;
    let stages = data::read_stages(file, &plan.doses)?;
    let report = analyze(&plan, &stages.stage1, stages.stage2.as_ref()).map_err(|e| match e {
        SimError::Config(m) => CliError::Data(m),
        e => e.into(),
    })?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| CliError::Io(e.to_string()))?;
    let txt = text::render(&report);
    if let Some(dir) = &args.out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), format!("{json}\n"))?;
        std::fs::write(dir.join("report.txt"), &txt)?;
    }
    if args.json {
        println!("{json}");
    } else {
        print!("{txt}");
    }
    Ok(())
}

fn cmd_models_list() {
    println!("candidates");
    for m in catalog::candidates() {
        println!("  {m}");
    }
    println!("true models");
    for name in std::iter::once("flat").chain(catalog::TRUE_MODEL_NAMES) {
        let m = catalog::true_model(name).expect("catalog name");
        let means: Vec<String> = m.evaluate_at(&catalog::DOSES).iter().map(|v| format!("{v:.4}")).collect();
        println!("  {name:<20} {m}  means [{}]", means.join(", "));
    }
}

fn cmd_contrasts_show(path: Option<&std::path::Path>) -> Result<(), CliError> {
    let cfg = match path {
        Some(p) => read_config(p)?.0,
        None => Config::standard(),
    };
    let doses = &cfg.design.doses;
    let n = allocate(cfg.design.n1.unwrap_or(120), doses.len())?;
    let models = cfg.candidates()?;
    let set = ContrastSet::from_models(&models, doses, &n)?;
    print!("{}", text::contrasts(&models, &set));
    Ok(())
}

fn threads_from_env() -> usize {
    std::env::var("ADAPTPOC_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Analyze(a) => cmd_analyze(&a),
        Command::Simulate(a) => simulate::run(&a, threads_from_env()),
        Command::Models { command: ModelsCommand::List } => {
            cmd_models_list();
            Ok(())
        }
        Command::Contrasts {
            command: ContrastsCommand::Show { config },
        } => cmd_contrasts_show(config.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("adaptpoc: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
