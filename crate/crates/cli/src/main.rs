use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use faultforge::campaign::{self, CampaignOptions, Session, SweepAxis, FAULT_FILE, RESULTS_DIR};
use faultforge::dataset::{synthetic_for_model, DatasetDescriptor, DatasetHandle};
use faultforge::evaluation::{evaluate_results, write_report, KpiReport, ReportFormat};
use faultforge::fault_gen::{generate_fault_matrix, load_fault_matrix, save_fault_matrix};
use faultforge::model::{builtin_model, load_model, Model, BUILTIN_NAMES};
use faultforge::scenario::{parse_scenario, ScenarioConfig, ENV_OUT, ENV_SEED};
use faultforge::Error;

const EXIT_VALIDATION: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_MISMATCH: u8 = 3;

/// Reproducible fault-injection campaigns for neural-network inference.
///
/// Exit codes: 0 success, 1 invalid input, 2 runtime failure, 3 replay
/// mismatch.
#[derive(Parser)]
#[command(name = "faultforge", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a fault matrix file from a scenario.
    Generate(GenerateArgs),
    /// Run a campaign and write its meta, fault and results sets.
    Run(RunArgs),
    /// Run one campaign per value of a scenario axis.
    Sweep(SweepArgs),
    /// Compute SDE/DUE tables from a results directory.
    Eval(EvalArgs),
    /// Re-execute a recorded campaign and compare it with its files.
    Replay(ReplayArgs),
}

#[derive(Args)]
struct ModelArg {
    /// Built-in model name (tiny-cnn, tiny-3d, tiny-det) or a model file.
    #[arg(long)]
    model: String,
}

#[derive(Args)]
struct GenerateArgs {
    /// Scenario YAML file.
    #[arg(long)]
    scenario: PathBuf,
    #[command(flatten)]
    model: ModelArg,
    /// Output fault file [default: $FAULTFORGE_OUT/campaign.alff].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Fault seed [default: $FAULTFORGE_SEED, else the scenario's seed].
    #[arg(long, env = ENV_SEED)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Args)]
struct CampaignArgs {
    /// Scenario YAML file.
    #[arg(long)]
    scenario: PathBuf,
    #[command(flatten)]
    model: ModelArg,
    /// `synthetic`, `synthetic:SEED`, or a data set descriptor (dataset.json).
    #[arg(long, default_value = "synthetic")]
    dataset: String,
    /// Output directory [default: $FAULTFORGE_OUT].
    #[arg(long = "out-dir", env = ENV_OUT)]
    out_dir: PathBuf,
    /// Add the clipper-hardened leg.
    #[arg(long, value_enum, default_value = "off")]
    mitigation: OnOff,
    /// Fault seed [default: $FAULTFORGE_SEED, else the scenario's seed].
    #[arg(long, env = ENV_SEED)]
    seed: Option<u64>,
    /// Worker threads; output is identical for any value.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: CampaignArgs,
    /// Fault matrix file [default: generated from the seed].
    #[arg(long)]
    faults: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CampaignArgs,
    /// layer, bit, faults-per-image or target.
    #[arg(long)]
    axis: String,
    /// Comma-separated values, e.g. `0,1,2` or `neurons,weights`.
    #[arg(long)]
    values: String,
}

#[derive(Args)]
struct EvalArgs {
    /// Campaign directory or its results/ directory.
    #[arg(long)]
    results: PathBuf,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
    /// Where to write the KPI files [default: the results directory].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Args)]
struct ReplayArgs {
    /// Fault matrix file of the campaign.
    #[arg(long)]
    faults: PathBuf,
    /// Runset file of the campaign.
    #[arg(long)]
    runset: PathBuf,
    #[command(flatten)]
    model: ModelArg,
    /// Data set [default: meta/dataset.json of the campaign directory].
    #[arg(long)]
    dataset: Option<String>,
    /// Scenario [default: meta/scenario.yml of the campaign directory].
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Results directory to compare [default: results/ of the campaign
    /// directory, if present].
    #[arg(long)]
    results: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

fn load_any_model(spec: &str) -> Result<Model> {
    if let Some(m) = builtin_model(spec) {
        return Ok(m);
    }
    let path = Path::new(spec);
    if !path.exists() {
        return Err(anyhow!(Error::Config(format!(
            "`{spec}` is neither a built-in model ({}) nor a file",
            BUILTIN_NAMES.join(", ")
        ))));
    }
    Ok(load_model(path)?)
}

fn load_dataset(spec: &str, model: &Model, size: u64) -> Result<DatasetHandle> {
    let seed = match spec.strip_prefix("synthetic") {
        Some("") => Some(0),
        Some(rest) => match rest.strip_prefix(':').map(str::parse::<u64>) {
            Some(Ok(seed)) => Some(seed),
            _ => return Err(anyhow!(Error::Config(format!("bad data set `{spec}` (synthetic:SEED)")))),
        },
        None => None,
    };
    Ok(match seed {
        Some(seed) => synthetic_for_model(model, size as usize, seed)?,
        None => DatasetDescriptor::load(spec)?.build(model)?,
    })
}

fn load_scenario(path: &Path, seed: Option<u64>) -> Result<ScenarioConfig> {
    let mut cfg = parse_scenario(path)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn print_kpi(label: &str, k: &KpiReport) {
    println!(
        "{label}: images {} sde {} ({:.4}) due {} ({:.4})",
        k.total, k.corrupted, k.sde_rate, k.due, k.due_rate
    );
}

fn cmd_generate(a: GenerateArgs) -> Result<u8> {
    let model = load_any_model(&a.model.model)?;
    let cfg = load_scenario(&a.scenario, a.seed)?;
    let out = match a.out {
        Some(p) => p,
        None => match std::env::var_os(ENV_OUT) {
            Some(dir) => PathBuf::from(dir).join("campaign.alff"),
            None => return Err(anyhow!(Error::Config(format!("--out is required unless {ENV_OUT} is set")))),
        },
    };
    let matrix = generate_fault_matrix(&model, &cfg, cfg.seed)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    save_fault_matrix(&matrix, &out)?;
    println!("wrote {} ({} faults, seed {})", out.display(), matrix.len(), matrix.seed);
    Ok(0)
}

fn session_for(c: &CampaignArgs) -> Result<(Model, DatasetHandle, ScenarioConfig)> {
    let model = load_any_model(&c.model.model)?;
    let cfg = load_scenario(&c.scenario, c.seed)?;
    let ds = load_dataset(&c.dataset, &model, cfg.dataset_size)?;
    Ok((model, ds, cfg))
}

fn cmd_run(a: RunArgs) -> Result<u8> {
    let c = &a.common;
    let (model, ds, cfg) = session_for(c)?;
    let matrix = match &a.faults {
        Some(p) => load_fault_matrix(p)?,
        None => generate_fault_matrix(&model, &cfg, cfg.seed)?,
    };
    let opts = CampaignOptions {
        with_mitigation: matches!(c.mitigation, OnOff::On),
        threads: c.threads,
    };
    let run = campaign::run_campaign(&model, &ds, &cfg, &matrix, opts, &c.out_dir)?;
    println!(
        "wrote {}: {} faults, {} runset records",
        c.out_dir.display(),
        run.matrix.len(),
        run.records().len()
    );
    let eval = run.evaluate()?;
    print_kpi("corr", &eval.corr);
    if let Some(r) = &eval.resil {
        print_kpi("resil", r);
    }
    Ok(0)
}

fn cmd_sweep(a: SweepArgs) -> Result<u8> {
    let axis: SweepAxis = a.axis.parse()?;
    let values = axis.parse_values(&a.values)?;
    let c = &a.common;
    let (model, ds, cfg) = session_for(c)?;
    let mut session = Session::new(model, ds, cfg)?;
    session.set_threads(c.threads)?;
    if matches!(c.mitigation, OnOff::On) {
        session.enable_mitigation()?;
    }
    for p in campaign::sweep(&mut session, axis, &values, &c.out_dir)? {
        print_kpi(&format!("{} {} -> {}", p.axis, p.value, p.dir.display()), &p.evaluation.corr);
        if let Some(r) = &p.evaluation.resil {
            print_kpi("  resil", r);
        }
    }
    Ok(0)
}

fn cmd_eval(a: EvalArgs) -> Result<u8> {
    let nested = a.results.join(RESULTS_DIR);
    let dir = if nested.is_dir() { nested } else { a.results.clone() };
    let eval = evaluate_results(&dir)?;
    let out = a.out.unwrap_or_else(|| dir.clone());
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let format = match a.format {
        Format::Csv => ReportFormat::Csv,
        Format::Json => ReportFormat::Json,
    };
    let mut written = write_report(&eval.corr, &out, "kpi", format)?;
    print_kpi("corr", &eval.corr);
    if let Some(r) = &eval.resil {
        written.extend(write_report(r, &out, "kpi_resil", format)?);
        print_kpi("resil", r);
    }
    for p in written {
        println!("wrote {}", p.display());
    }
    Ok(0)
}

fn cmd_replay(a: ReplayArgs) -> Result<u8> {
    let run_dir = a.faults.parent().and_then(Path::parent).map(Path::to_path_buf).unwrap_or_default();
    let model = load_any_model(&a.model.model)?;
    let scenario = a.scenario.unwrap_or_else(|| run_dir.join(campaign::SCENARIO_FILE));
    let cfg = parse_scenario(&scenario)?;
    let dataset = a
        .dataset
        .unwrap_or_else(|| run_dir.join(campaign::DATASET_FILE).to_string_lossy().into_owned());
    let results = a.results.or_else(|| {
        let r = run_dir.join(RESULTS_DIR);
        (a.faults.ends_with(FAULT_FILE) && r.is_dir()).then_some(r)
    });
    let replayed = load_dataset(&dataset, &model, cfg.dataset_size).and_then(|ds| {
        Ok(campaign::replay(&a.faults, &a.runset, &model, &ds, &cfg, results.as_deref(), a.threads)?)
    });
    let report = match replayed {
        Ok(r) => r,
        Err(e) if is_refusal(&e) => {
            eprintln!("replay refused: {}", describe(&e));
            return Ok(EXIT_MISMATCH);
        }
        Err(e) => return Err(e),
    };
    for m in &report.mismatches {
        eprintln!("mismatch: {m}");
    }
    println!(
        "replayed {} records, {} result files: {} mismatches",
        report.records_checked,
        report.files_checked,
        report.mismatches.len()
    );
    Ok(if report.is_clean() { 0 } else { EXIT_MISMATCH })
}

/// Recorded files that are damaged or belong to another model or data set.
fn is_refusal(err: &anyhow::Error) -> bool {
    matches!(
        err.downcast_ref::<Error>(),
        Some(Error::Mismatch(_) | Error::Checksum { .. } | Error::Parse { .. } | Error::Version { .. })
    )
}

/// The error chain joined by `: `, skipping causes already quoted by the
/// message above them.
fn describe(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !out.ends_with(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

/// Invalid input exits 1; failures while executing exit 2.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Io { .. } | Error::Shape { .. } | Error::EpochInProgress | Error::EndOfFaults) | None => EXIT_RUNTIME,
        Some(_) => EXIT_VALIDATION,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Run(a) => cmd_run(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Replay(a) => cmd_replay(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
