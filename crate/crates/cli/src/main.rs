//! `sfa`: dataset generation, training, evaluation, and diagnostics for
//! the domain-adaptive detection transformer benchmark.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage or
//! configuration errors. The `SFA_SEED` environment variable overrides
//! the seed from any config file or flag.

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sfa_core::config::{Arm, ExperimentConfig, ShiftConfig};
use sfa_core::data::{read_split, write_benchmark, Split};
use sfa_core::error::CoreError;
use sfa_core::eval::{
    collect_features, covering_bound, evaluate_map, frobenius_norm, pca_2d, proxy_a_distance,
    spectral_norm, write_feature_csv, write_pca_csv, BoundInputs, FeatureStage,
};
use sfa_core::trainer::{check_classes, fit, ModelBundle};

#[derive(Parser)]
#[command(name = "sfa", version, about = "Domain-adaptive detection transformer benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the two-domain synthetic dataset.
    GenData(GenDataArgs),
    /// Train one experiment arm.
    Train(TrainArgs),
    /// Evaluate a checkpoint and print the report as JSON.
    Eval(EvalArgs),
    /// Dump features, estimate the proxy A-distance, and compute the
    /// discriminator covering bound.
    Diagnose(DiagnoseArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Training scenes per domain.
    #[arg(long, default_value_t = 500)]
    count: usize,
    /// Evaluation scenes per domain (default: 2/5 of count).
    #[arg(long)]
    val_count: Option<usize>,
    /// Shift preset: none | fog.
    #[arg(long, default_value = "fog")]
    shift: String,
    /// Base seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Square image side length.
    #[arg(long, default_value_t = 64)]
    size: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML experiment config; flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Arm: source_only | da_cnn | sfa.
    #[arg(long)]
    arm: Option<String>,
    /// Comma-separated loss terms to disable:
    /// dqfa_enc,dqfa_dec,tda_enc,tda_dec,dq,tw,hr,bmc.
    #[arg(long)]
    ablate: Option<String>,
    /// Dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Run output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Continue from the last checkpoint in the output directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Domain to evaluate: target | source.
    #[arg(long, default_value = "target")]
    domain: String,
    /// Split to evaluate: val | train.
    #[arg(long, default_value = "val")]
    split: String,
    #[arg(long, default_value_t = 0.05)]
    score_threshold: f64,
    #[arg(long, default_value_t = 0.5)]
    iou_threshold: f64,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory (val split of both domains is used).
    #[arg(long)]
    data: PathBuf,
    /// Output directory for CSV/JSON artifacts.
    #[arg(long)]
    out: PathBuf,
    /// Scenes per domain to trace.
    #[arg(long, default_value_t = 50)]
    scenes: usize,
    /// Keep every n-th token in the dumps.
    #[arg(long, default_value_t = 8)]
    token_stride: usize,
    /// Covering resolution for the capacity bound.
    #[arg(long, default_value_t = 1.0)]
    epsilon: f64,
}

#[derive(Debug)]
enum AppError {
    Usage(String),
    Runtime(String),
}

impl fmt::Display for AppError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AppError::Usage(msg) | AppError::Runtime(msg) => write!(f, "{msg}"),
        }
    }
}

impl From<CoreError> for AppError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Config(_) => AppError::Usage(e.to_string()),
            other => AppError::Runtime(other.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(AppError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(AppError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<(), AppError> {
    match cli.command {
        Command::GenData(args) => gen_data(args),
        Command::Train(args) => train(args),
        Command::Eval(args) => eval(args),
        Command::Diagnose(args) => diagnose(args),
    }
}

fn env_seed() -> Result<Option<u64>, AppError> {
    match std::env::var("SFA_SEED") {
        Ok(text) => text
            .parse::<u64>()
            .map(Some)
            .map_err(|_| AppError::Usage(format!("SFA_SEED must be an integer, got {text:?}"))),
        Err(_) => Ok(None),
    }
}

fn gen_data(args: GenDataArgs) -> Result<(), AppError> {
    let shift = ShiftConfig::preset(&args.shift)
        .ok_or_else(|| AppError::Usage(format!("unknown shift preset {:?}", args.shift)))?;
    let seed = env_seed()?.unwrap_or(args.seed);
    let val_count = args.val_count.unwrap_or(args.count * 2 / 5);
    let manifest = write_benchmark(
        &args.out,
        args.count,
        val_count,
        &shift,
        seed,
        (args.size, args.size),
    )?;
    println!(
        "wrote {} train + {} val scenes per domain to {}",
        manifest.train_count,
        manifest.val_count,
        args.out.display()
    );
    Ok(())
}

fn load_config(path: &Path) -> Result<ExperimentConfig, AppError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| AppError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    toml::from_str(&text)
        .map_err(|e| AppError::Usage(format!("invalid config {}: {e}", path.display())))
}

fn train(args: TrainArgs) -> Result<(), AppError> {
    let mut cfg = match &args.config {
        Some(path) => load_config(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(arm) = &args.arm {
        cfg.train.arm =
            Arm::parse(arm).ok_or_else(|| AppError::Usage(format!("unknown arm {arm:?}")))?;
    }
    if let Some(flags) = &args.ablate {
        cfg.train.ablation = cfg.train.ablation.clone().with_disabled(flags)?;
    }
    if let Some(data) = args.data {
        cfg.data_dir = data;
    }
    if let Some(out) = args.out {
        cfg.out_dir = out;
    }
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        cfg.train.epochs = epochs;
    }
    if let Some(seed) = env_seed()? {
        cfg.train.seed = seed;
    }
    cfg.validate()?;

    std::fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| AppError::Runtime(format!("cannot create {}: {e}", cfg.out_dir.display())))?;
    let resolved = toml::to_string_pretty(&cfg)
        .map_err(|e| AppError::Runtime(format!("config serialization: {e}")))?;
    let resolved = format!(
        "# resolved configuration, sfa v{}\n{resolved}",
        env!("CARGO_PKG_VERSION")
    );
    let resolved_path = cfg.out_dir.join("resolved.toml");
    std::fs::write(&resolved_path, resolved)
        .map_err(|e| AppError::Runtime(format!("cannot write {}: {e}", resolved_path.display())))?;

    let summary = fit(&cfg, args.resume)?;
    println!(
        "trained {} epochs (arm {}); final target mAP50 {:.4}, best {:.4}",
        summary.epochs_run,
        cfg.train.arm.as_str(),
        summary.final_target_map,
        summary.best_target_map
    );
    println!("metrics: {}", summary.metrics_path.display());
    println!("checkpoints: {}, {}", summary.last_checkpoint.display(), summary.best_checkpoint.display());
    Ok(())
}

fn parse_domain(name: &str) -> Result<u8, AppError> {
    match name {
        "source" => Ok(0),
        "target" => Ok(1),
        other => Err(AppError::Usage(format!("unknown domain {other:?}"))),
    }
}

fn parse_split(name: &str) -> Result<Split, AppError> {
    match name {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        other => Err(AppError::Usage(format!("unknown split {other:?}"))),
    }
}

fn eval(args: EvalArgs) -> Result<(), AppError> {
    let (bundle, _adam, state) = ModelBundle::load(&args.checkpoint)?;
    let domain = parse_domain(&args.domain)?;
    let split = parse_split(&args.split)?;
    let scenes = read_split(&args.data, domain, split)?;
    check_classes(&scenes, state.model.num_classes)?;
    let mut report = evaluate_map(
        &bundle.model,
        &bundle.store,
        &scenes,
        args.score_threshold,
        args.iou_threshold,
    )?;
    report.arm = Some(state.arm.as_str().to_string());
    report.checkpoint = Some(args.checkpoint.display().to_string());
    println!(
        "{}",
        serde_json::to_string_pretty(&report)
            .map_err(|e| AppError::Runtime(format!("report serialization: {e}")))?
    );
    Ok(())
}

fn diagnose(args: DiagnoseArgs) -> Result<(), AppError> {
    let (bundle, _adam, state) = ModelBundle::load(&args.checkpoint)?;
    std::fs::create_dir_all(&args.out)
        .map_err(|e| AppError::Runtime(format!("cannot create {}: {e}", args.out.display())))?;

    let mut scenes = Vec::new();
    for domain in [0u8, 1u8] {
        let split = read_split(&args.data, domain, Split::Val)?;
        scenes.extend(split.into_iter().take(args.scenes));
    }
    check_classes(&scenes, state.model.num_classes)?;

    // Feature dumps and PCA projections per stage.
    let mut encoder_rows = Vec::new();
    for stage in [FeatureStage::Backbone, FeatureStage::Encoder, FeatureStage::Decoder] {
        let rows = collect_features(&bundle.model, &bundle.store, &scenes, stage, args.token_stride)?;
        let csv = args.out.join(format!("features_{}.csv", stage.as_str()));
        write_feature_csv(&csv, &rows)?;
        let projections = pca_2d(&rows);
        let pca = args.out.join(format!("pca_{}.csv", stage.as_str()));
        write_pca_csv(&pca, &rows, &projections)?;
        if stage == FeatureStage::Encoder {
            encoder_rows = rows;
        }
    }

    // Proxy A-distance on final-encoder-layer tokens.
    let last_layer = encoder_rows.iter().map(|r| r.layer).max().unwrap_or(0);
    let source_feats: Vec<Vec<f64>> = encoder_rows
        .iter()
        .filter(|r| r.layer == last_layer && r.domain == 0)
        .map(|r| r.values.clone())
        .collect();
    let target_feats: Vec<Vec<f64>> = encoder_rows
        .iter()
        .filter(|r| r.layer == last_layer && r.domain == 1)
        .map(|r| r.values.clone())
        .collect();
    let a_distance = proxy_a_distance(&source_feats, &target_feats, 0)?;

    // Capacity bound from the trained discriminator weights, with the
    // zero matrix as reference and unit rectifier constants.
    let disc = bundle
        .enc_disc
        .as_ref()
        .or(bundle.dec_disc.as_ref())
        .or(bundle.cnn_disc.as_ref());
    let bound = match disc {
        Some(disc) => {
            let norms: Vec<f64> = disc
                .weight_params()
                .iter()
                .map(|&p| spectral_norm(bundle.store.value(p)))
                .collect();
            let flat: Vec<f64> = source_feats
                .iter()
                .chain(&target_feats)
                .flatten()
                .copied()
                .collect();
            let inputs = BoundInputs {
                reference_distances: norms.clone(),
                lipschitz: vec![1.0; norms.len()],
                spectral_norms: norms,
                max_width: state.model.hidden_dim.max(2) as f64,
                input_norm: frobenius_norm(&flat),
                resolution: args.epsilon,
            };
            Some((covering_bound(&inputs)?, inputs))
        }
        None => None,
    };

    let report = serde_json::json!({
        "checkpoint": args.checkpoint.display().to_string(),
        "arm": state.arm.as_str(),
        "proxy_a_distance": {
            "stage": "encoder",
            "layer": last_layer,
            "value": a_distance,
            "samples_per_domain": source_feats.len().min(target_feats.len()),
        },
        "covering_bound": bound.as_ref().map(|(value, inputs)| serde_json::json!({
            "value": value,
            "inputs": inputs,
        })),
    });
    let path = args.out.join("diagnostics.json");
    std::fs::write(&path, serde_json::to_string_pretty(&report).expect("json"))
        .map_err(|e| AppError::Runtime(format!("cannot write {}: {e}", path.display())))?;
    println!("{}", serde_json::to_string_pretty(&report).expect("json"));
    Ok(())
}
