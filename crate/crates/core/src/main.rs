//! Experiment CLI: generate synthetic environments, run single training
//! jobs or full leave-a-dataset-out suites, and re-render saved results.
//!
//! Exit status: 0 success, 2 usage/config error, 1 runtime failure.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use oodbatch::augment::AugmentConfig;
use oodbatch::data::{
    class_counts, generate_synthetic, load_manifest, write_manifest, write_pack, DatasetManifest,
    ImagePack, SynthConfig,
};
use oodbatch::experiment::{
    enumerate_plans, render_table, run_suite, train_one, ExperimentPlan, PlanPreset,
    SamplerModeName, SuiteResult, TrainConfig,
};
use oodbatch::metrics::report_to_json;
use oodbatch::nn::{save_checkpoint, ModelSpec, OptimConfig};

#[derive(Parser)]
#[command(
    name = "oodbatch",
    about = "Balanced vs random batch sampling for out-of-distribution multi-label classification",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic multi-environment datasets (manifest CSV + XRPK pack per environment)
    Synth(SynthArgs),
    /// Train one leave-a-dataset-out experiment
    Run(RunArgs),
    /// Run the full comparison suite over plans x seeds x modes
    Suite(SuiteArgs),
    /// Re-render a saved suite JSON as a table
    Report(ReportArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Number of environments [default: 4]
    #[arg(long)]
    envs: Option<usize>,
    /// Records per environment [default: 200]
    #[arg(long)]
    n: Option<usize>,
    /// Image side length in pixels [default: 16]
    #[arg(long)]
    size: Option<usize>,
    /// Core (label-consistent) signal strength in [0,1] [default: 0.6]
    #[arg(long)]
    core: Option<f64>,
    /// Comma-separated per-environment spurious strengths in [-1,1] [default: alternating +0.8/-0.8]
    #[arg(long)]
    spurious: Option<String>,
    /// Pixel noise std as a fraction of full intensity [default: 0.05]
    #[arg(long)]
    noise: Option<f64>,
    /// Probability a label is missing [default: 0]
    #[arg(long)]
    missing: Option<f64>,
    /// Generator seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// JSON config file; explicit flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct TrainFlags {
    /// Directory holding <env>.csv / <env>.xrpk pairs
    #[arg(long)]
    data: PathBuf,
    /// Epochs [default: 200]
    #[arg(long)]
    epochs: Option<usize>,
    /// Batch size [default: 64]
    #[arg(long = "batch-size")]
    batch_size: Option<usize>,
    /// Model architecture: logistic | mlp1 [default: mlp1]
    #[arg(long)]
    model: Option<String>,
    /// Hidden units for mlp1 [default: 64]
    #[arg(long)]
    hidden: Option<usize>,
    /// Augmentation/eval target side length [default: 16]
    #[arg(long = "target-size")]
    target_size: Option<usize>,
    /// Disable training-time augmentation
    #[arg(long = "no-augment")]
    no_augment: bool,
    /// Learning rate [default: 1e-3]
    #[arg(long)]
    lr: Option<f64>,
    /// Weight decay [default: 1e-5]
    #[arg(long = "weight-decay")]
    weight_decay: Option<f64>,
    /// Early-stopping patience in epochs; omit to run all epochs and keep the best
    #[arg(long)]
    patience: Option<usize>,
    /// Sequential training subset size per environment
    #[arg(long = "train-n")]
    train_n: Option<usize>,
    /// Sequential validation subset size
    #[arg(long = "valid-n")]
    valid_n: Option<usize>,
    /// Sequential test subset size
    #[arg(long = "test-n")]
    test_n: Option<usize>,
    /// JSON config file; explicit flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    train: TrainFlags,
    /// Two training environment names, comma separated
    #[arg(long)]
    train_envs: Option<String>,
    /// Alias kept close to the published wording
    #[arg(long = "train", conflicts_with = "train_envs")]
    train_pair: Option<String>,
    /// Validation environment name
    #[arg(long)]
    valid: String,
    /// Test environment name
    #[arg(long)]
    test: String,
    /// Sampler mode: balanced | random [default: balanced]
    #[arg(long)]
    mode: Option<String>,
    /// Seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for run_log.jsonl, best.ckpt, test_report.json
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SuiteArgs {
    #[command(flatten)]
    train: TrainFlags,
    /// Plan preset: paper6 | all12 [default: paper6]
    #[arg(long)]
    preset: Option<String>,
    /// Comma-separated seeds [default: 0,42,99]
    #[arg(long)]
    seeds: Option<String>,
    /// Comma-separated modes out of balanced,random [default: both]
    #[arg(long)]
    modes: Option<String>,
    /// Parallel training jobs [default: 1]
    #[arg(long)]
    jobs: Option<usize>,
    /// Output directory for suite.json (and partial.json on failure)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Path to a suite.json produced by `suite`
    #[arg(long)]
    input: PathBuf,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }
    fn runtime(msg: impl Into<String>) -> Self {
        CliError::Runtime(msg.into())
    }
}

type CliResult<T> = Result<T, CliError>;

fn load_config_file(path: &Option<PathBuf>) -> CliResult<serde_json::Map<String, serde_json::Value>> {
    match path {
        None => Ok(serde_json::Map::new()),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", p.display())))?;
            let v: serde_json::Value = serde_json::from_str(&text)
                .map_err(|e| CliError::usage(format!("bad JSON in {}: {e}", p.display())))?;
            v.as_object()
                .cloned()
                .ok_or_else(|| CliError::usage("config file must hold a JSON object"))
        }
    }
}

// flag value, else config-file value, else default
fn pick<T: Clone, F: FnOnce(&serde_json::Value) -> Option<T>>(
    flag: &Option<T>,
    cfg: &serde_json::Map<String, serde_json::Value>,
    key: &str,
    parse: F,
    default: T,
) -> T {
    if let Some(v) = flag {
        return v.clone();
    }
    if let Some(v) = cfg.get(key) {
        if let Some(parsed) = parse(v) {
            return parsed;
        }
    }
    default
}

fn parse_f64_list(s: &str) -> CliResult<Vec<f64>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| CliError::usage(format!("bad number {t:?}")))
        })
        .collect()
}

fn parse_u64_list(s: &str) -> CliResult<Vec<u64>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<u64>()
                .map_err(|_| CliError::usage(format!("bad seed {t:?}")))
        })
        .collect()
}

fn parse_mode(s: &str) -> CliResult<SamplerModeName> {
    match s {
        "balanced" => Ok(SamplerModeName::Balanced),
        "random" => Ok(SamplerModeName::Random),
        other => Err(CliError::usage(format!(
            "unknown mode {other:?} (expected balanced|random)"
        ))),
    }
}

fn cmd_synth(args: &SynthArgs) -> CliResult<()> {
    let cfg_file = load_config_file(&args.config)?;
    let n_envs = pick(&args.envs, &cfg_file, "envs", |v| v.as_u64().map(|x| x as usize), 4);
    let spurious = match (&args.spurious, cfg_file.get("spurious")) {
        (Some(s), _) => parse_f64_list(s)?,
        (None, Some(serde_json::Value::String(s))) => parse_f64_list(s)?,
        (None, Some(serde_json::Value::Array(a))) => a
            .iter()
            .map(|v| v.as_f64().ok_or_else(|| CliError::usage("bad spurious entry")))
            .collect::<CliResult<Vec<f64>>>()?,
        _ => (0..n_envs).map(|e| if e % 2 == 0 { 0.8 } else { -0.8 }).collect(),
    };
    if spurious.len() != n_envs {
        return Err(CliError::usage("spurious length must equal envs"));
    }
    let cfg = SynthConfig {
        n_envs,
        n_per_env: pick(&args.n, &cfg_file, "n", |v| v.as_u64().map(|x| x as usize), 200),
        image_size: pick(&args.size, &cfg_file, "size", |v| v.as_u64().map(|x| x as usize), 16),
        core_strength: pick(&args.core, &cfg_file, "core", |v| v.as_f64(), 0.6),
        spurious_strength: spurious,
        noise_std: pick(&args.noise, &cfg_file, "noise", |v| v.as_f64(), 0.05),
        missing_rate: pick(&args.missing, &cfg_file, "missing", |v| v.as_f64(), 0.0),
        seed: pick(&args.seed, &cfg_file, "seed", |v| v.as_u64(), 0),
    };
    let envs = generate_synthetic(&cfg).map_err(|e| CliError::usage(e.to_string()))?;
    fs::create_dir_all(&args.out)
        .map_err(|e| CliError::runtime(format!("cannot create {}: {e}", args.out.display())))?;
    for (manifest, pack) in &envs {
        let csv = args.out.join(format!("{}.csv", manifest.name));
        let xrpk = args.out.join(format!("{}.xrpk", manifest.name));
        write_manifest(manifest, &csv).map_err(|e| CliError::runtime(e.to_string()))?;
        write_pack(pack, &xrpk).map_err(|e| CliError::runtime(e.to_string()))?;
        let counts = class_counts(manifest);
        println!(
            "{}: {} records, {}x{} px, per-task (pos,neg,missing) = {:?}",
            manifest.name,
            manifest.records.len(),
            pack.height,
            pack.width,
            counts
        );
    }
    Ok(())
}

fn load_env_dir(dir: &Path) -> CliResult<BTreeMap<String, (DatasetManifest, ImagePack)>> {
    let mut envs = BTreeMap::new();
    let entries = fs::read_dir(dir)
        .map_err(|e| CliError::usage(format!("cannot read data dir {}: {e}", dir.display())))?;
    for entry in entries {
        let path = entry.map_err(|e| CliError::runtime(e.to_string()))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("csv") {
            continue;
        }
        let pack_path = path.with_extension("xrpk");
        if !pack_path.exists() {
            return Err(CliError::usage(format!(
                "manifest {} has no matching pack {}",
                path.display(),
                pack_path.display()
            )));
        }
        let (manifest, pack) =
            load_manifest(&path, &pack_path).map_err(|e| CliError::usage(e.to_string()))?;
        envs.insert(manifest.name.clone(), (manifest, pack));
    }
    if envs.is_empty() {
        return Err(CliError::usage(format!(
            "no manifest/pack pairs found in {}",
            dir.display()
        )));
    }
    Ok(envs)
}

fn build_train_config(flags: &TrainFlags) -> CliResult<TrainConfig> {
    let cfg_file = load_config_file(&flags.config)?;
    let target_size = pick(
        &flags.target_size,
        &cfg_file,
        "target_size",
        |v| v.as_u64().map(|x| x as usize),
        16,
    );
    let model_name = pick(
        &flags.model,
        &cfg_file,
        "model",
        |v| v.as_str().map(|s| s.to_string()),
        "mlp1".to_string(),
    );
    let hidden = pick(&flags.hidden, &cfg_file, "hidden", |v| v.as_u64().map(|x| x as usize), 64);
    let input_dim = target_size * target_size;
    let model = match model_name.as_str() {
        "logistic" => ModelSpec::logistic(input_dim, 4),
        "mlp1" => ModelSpec::mlp1(input_dim, hidden, 4),
        other => return Err(CliError::usage(format!("unknown model {other:?}"))),
    };
    let optim = OptimConfig {
        learning_rate: pick(&flags.lr, &cfg_file, "lr", |v| v.as_f64(), 1e-3),
        weight_decay: pick(&flags.weight_decay, &cfg_file, "weight_decay", |v| v.as_f64(), 1e-5),
        ..OptimConfig::default()
    };
    let aug = AugmentConfig {
        target_size,
        enabled: !flags.no_augment,
        ..AugmentConfig::default()
    };
    aug.validate().map_err(CliError::usage)?;
    Ok(TrainConfig {
        epochs: pick(&flags.epochs, &cfg_file, "epochs", |v| v.as_u64().map(|x| x as usize), 200),
        batch_size: pick(
            &flags.batch_size,
            &cfg_file,
            "batch_size",
            |v| v.as_u64().map(|x| x as usize),
            64,
        ),
        optim,
        aug,
        model,
        early_stop_patience: flags.patience,
        train_n: flags.train_n,
        valid_n: flags.valid_n,
        test_n: flags.test_n,
    })
}

fn cmd_run(args: &RunArgs) -> CliResult<()> {
    let pair = args
        .train_envs
        .as_ref()
        .or(args.train_pair.as_ref())
        .ok_or_else(|| CliError::usage("--train (or --train-envs) is required"))?;
    let parts: Vec<&str> = pair.split(',').map(|s| s.trim()).collect();
    if parts.len() != 2 {
        return Err(CliError::usage("--train expects two comma-separated names"));
    }
    let mode = parse_mode(args.mode.as_deref().unwrap_or("balanced"))?;
    let cfg = build_train_config(&args.train)?;
    if mode == SamplerModeName::Balanced && cfg.batch_size % 2 != 0 {
        return Err(CliError::usage(
            "batch size not divisible by environment count",
        ));
    }
    let envs = load_env_dir(&args.train.data)?;
    let plan = ExperimentPlan {
        train_envs: (parts[0].to_string(), parts[1].to_string()),
        valid_env: args.valid.clone(),
        test_env: args.test.clone(),
        seed: args.seed.unwrap_or(0),
        mode,
        label: format!("{}_{}/{}/{}", parts[0], parts[1], args.valid, args.test),
    };
    let result = train_one(&plan, &envs, &cfg).map_err(|e| CliError::runtime(e.to_string()))?;

    fs::create_dir_all(&args.out)
        .map_err(|e| CliError::runtime(format!("cannot create {}: {e}", args.out.display())))?;
    let mut log = fs::File::create(args.out.join("run_log.jsonl"))
        .map_err(|e| CliError::runtime(e.to_string()))?;
    for rec in &result.history {
        let mut line = serde_json::to_value(rec).unwrap();
        line["mode"] = serde_json::json!(plan.mode.as_str());
        line["split"] = serde_json::json!(plan.label);
        line["seed"] = serde_json::json!(plan.seed);
        writeln!(log, "{line}").map_err(|e| CliError::runtime(e.to_string()))?;
    }
    save_checkpoint(&result.best_state, &result.model_spec, &args.out.join("best.ckpt"))
        .map_err(|e| CliError::runtime(e.to_string()))?;
    let tasks = envs.values().next().unwrap().0.tasks.clone();
    let report = report_to_json(&result.test_report, &tasks, &plan.label, plan.seed);
    fs::write(
        args.out.join("test_report.json"),
        serde_json::to_string_pretty(&report).unwrap(),
    )
    .map_err(|e| CliError::runtime(e.to_string()))?;
    println!(
        "best valid AUC {:.4} at epoch {}; test mean AUC {}",
        result.best_valid_auc,
        result.best_epoch,
        result
            .test_report
            .mean_auc
            .map_or("-".to_string(), |v| format!("{v:.4}")),
    );
    Ok(())
}

fn cmd_suite(args: &SuiteArgs) -> CliResult<()> {
    let preset = match args.preset.as_deref().unwrap_or("paper6") {
        "paper6" => PlanPreset::Paper6,
        "all12" => PlanPreset::All12,
        other => return Err(CliError::usage(format!("unknown preset {other:?}"))),
    };
    let seeds = parse_u64_list(args.seeds.as_deref().unwrap_or("0,42,99"))?;
    let modes: Vec<SamplerModeName> = match &args.modes {
        None => vec![SamplerModeName::Balanced, SamplerModeName::Random],
        Some(s) => s
            .split(',')
            .map(|m| parse_mode(m.trim()))
            .collect::<CliResult<Vec<_>>>()?,
    };
    let cfg = build_train_config(&args.train)?;
    let envs = load_env_dir(&args.train.data)?;
    if envs.len() != 4 {
        return Err(CliError::usage(format!(
            "suite needs exactly 4 environments, found {}",
            envs.len()
        )));
    }
    let names: Vec<String> = envs.keys().cloned().collect();
    let plans = enumerate_plans(&names, preset).map_err(|e| CliError::usage(e.to_string()))?;

    fs::create_dir_all(&args.out)
        .map_err(|e| CliError::runtime(format!("cannot create {}: {e}", args.out.display())))?;
    let suite = match run_suite(&plans, &envs, &cfg, &seeds, &modes, args.jobs.unwrap_or(1)) {
        Ok(s) => s,
        Err(e) => {
            // leave a partial-results marker so the failed job is traceable
            let partial = serde_json::json!({ "error": e.to_string(), "completed": false });
            let _ = fs::write(
                args.out.join("partial.json"),
                serde_json::to_string_pretty(&partial).unwrap(),
            );
            return Err(CliError::runtime(e.to_string()));
        }
    };
    fs::write(
        args.out.join("suite.json"),
        serde_json::to_string_pretty(&suite).unwrap(),
    )
    .map_err(|e| CliError::runtime(e.to_string()))?;
    print!("{}", render_table(&suite));
    Ok(())
}

fn cmd_report(args: &ReportArgs) -> CliResult<()> {
    let text = fs::read_to_string(&args.input)
        .map_err(|e| CliError::usage(format!("cannot read {}: {e}", args.input.display())))?;
    let suite: SuiteResult =
        serde_json::from_str(&text).map_err(|e| CliError::usage(format!("bad suite JSON: {e}")))?;
    print!("{}", render_table(&suite));
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Run(a) => cmd_run(a),
        Command::Suite(a) => cmd_suite(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
