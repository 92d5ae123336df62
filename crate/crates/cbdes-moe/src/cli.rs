//! Command implementations behind the `cbdes` binary: train, eval,
//! ablate-lb, and bench. Each command is an ordinary function so tests can
//! drive it without spawning a process.
//!
//! Option precedence: command-line flags override the TOML config file,
//! which overrides built-in defaults. `CBDES_SEED` stands in for a missing
//! `--seed` flag.

use crate::bench::{self, BenchConfig};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::moe::{FusionMode, LossReport};
use crate::train::{
    self, evaluate, eval_scenes, run_ablation, EvalReport, ModelConfig, MoeModel, TrainConfig,
};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "cbdes",
    about = "Heterogeneous mixture-of-experts with a self-attention router",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Train with soft gating and write checkpoint, loss curve, and summary
    Train(TrainArgs),
    /// Evaluate a checkpoint under soft, top-1, or top-k fusion
    Eval(EvalArgs),
    /// Paired trainings with and without load balancing over several seeds
    AblateLb(AblateArgs),
    /// Time the expert stage: dense soft fusion vs sparse top-1
    Bench(BenchArgs),
}

/// Flags shared by commands that build a model.
#[derive(Args, Clone, Default)]
pub struct CommonFlags {
    /// Random seed (model init, data, shuffling)
    #[arg(long, env = "CBDES_SEED")]
    pub seed: Option<u64>,
    /// Number of experts
    #[arg(long = "experts")]
    pub experts: Option<usize>,
    /// Router attention embedding dim
    #[arg(long = "d-emb")]
    pub d_emb: Option<usize>,
    /// Router attention heads
    #[arg(long)]
    pub heads: Option<usize>,
    /// Worker threads for heavy kernels
    #[arg(long)]
    pub threads: Option<usize>,
    /// TOML config file ([model] and [train] sections)
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Default)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonFlags,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long = "batch-size")]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Load-balance weight
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long = "n-train")]
    pub n_train: Option<usize>,
    #[arg(long = "n-eval")]
    pub n_eval: Option<usize>,
    /// Output directory
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Checkpoint to evaluate
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Fusion mode: soft | top1 | topk
    #[arg(long, default_value = "top1")]
    pub mode: String,
    /// k for --mode topk
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, env = "CBDES_SEED")]
    pub seed: Option<u64>,
    #[arg(long = "n-eval")]
    pub n_eval: Option<usize>,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
}

#[derive(Args, Default)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: CommonFlags,
    /// Number of seeds (base seed, base+1, ...)
    #[arg(long, default_value_t = 3)]
    pub seeds: usize,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long = "batch-size")]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Load-balance weight of the "on" arm
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long = "n-train")]
    pub n_train: Option<usize>,
    #[arg(long = "n-eval")]
    pub n_eval: Option<usize>,
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
}

#[derive(Args, Default)]
pub struct BenchArgs {
    /// Reuse a trained checkpoint; otherwise a fresh model is built
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, env = "CBDES_SEED")]
    pub seed: Option<u64>,
    /// Comma-separated batch sizes
    #[arg(long, default_value = "1,2,4,8,16")]
    pub batches: String,
    /// Timing repetitions per point
    #[arg(long, default_value_t = 20)]
    pub reps: usize,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
}

/// `[model]` / `[train]` sections of the TOML config file.
#[derive(Debug, Default, Deserialize)]
struct FileConfig {
    model: Option<ModelConfig>,
    train: Option<TrainConfig>,
}

fn read_file_config(path: Option<&Path>) -> Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            toml::from_str(&text)
                .map_err(|e| Error::InvalidConfig(format!("config file {}: {e}", p.display())))
        }
    }
}

fn resolve_common(common: &CommonFlags) -> Result<(ModelConfig, TrainConfig)> {
    let file = read_file_config(common.config.as_deref())?;
    let file_had_model = file.model.is_some();
    let mut model = file.model.unwrap_or_default();
    let mut train = file.train.unwrap_or_default();
    if let Some(seed) = common.seed {
        train.seed = seed;
        model.seed = seed;
    } else if !file_had_model {
        model.seed = train.seed;
    }
    if let Some(k) = common.experts {
        model.num_experts = k;
    }
    if let Some(d) = common.d_emb {
        model.d_emb = d;
    }
    if let Some(h) = common.heads {
        model.heads = h;
    }
    if let Some(t) = common.threads {
        train.threads = t;
    }
    Ok((model, train))
}

fn apply_train_overrides(train: &mut TrainConfig, args: &TrainArgs) {
    if let Some(v) = args.epochs {
        train.epochs = v;
    }
    if let Some(v) = args.batch_size {
        train.batch_size = v;
    }
    if let Some(v) = args.lr {
        train.lr = v;
    }
    if let Some(v) = args.lambda {
        train.lambda = v;
    }
    if let Some(v) = args.n_train {
        train.n_train = v;
    }
    if let Some(v) = args.n_eval {
        train.n_eval = v;
    }
}

fn write_losses_csv(path: &Path, num_experts: usize, reports: &[LossReport]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(file, "{}", LossReport::csv_header(num_experts))?;
    for r in reports {
        writeln!(file, "{}", r.csv_row())?;
    }
    Ok(())
}

/// Everything `summary.txt` records about a finished training run.
#[derive(Serialize)]
struct TrainSummary<'a> {
    model: &'a ModelConfig,
    train: &'a TrainConfig,
    steps: usize,
    initial_task_loss: f64,
    final_task_loss: f64,
    final_total_loss: f64,
    eval_soft: EvalReport,
    eval_top1: EvalReport,
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let (model_cfg, mut train_cfg) = resolve_common(&args.common)?;
    apply_train_overrides(&mut train_cfg, args);
    train_cfg.validate()?;
    std::fs::create_dir_all(&args.out)?;

    let mut outcome = train::train(&model_cfg, &train_cfg)?;
    write_losses_csv(
        &args.out.join("losses.csv"),
        outcome.model.num_experts(),
        &outcome.reports,
    )?;
    checkpoint::save(&outcome.model, &args.out.join("checkpoint.bin"))?;
    std::fs::write(
        args.out.join("dataset_manifest.json"),
        serde_json::to_string_pretty(&outcome.manifest)
            .map_err(|e| Error::InvalidConfig(e.to_string()))?,
    )?;

    let eval_set = eval_scenes(&train_cfg);
    let eval_soft = evaluate(
        &mut outcome.model,
        &eval_set,
        FusionMode::SoftAll,
        train_cfg.threads,
    )?;
    let eval_top1 = evaluate(
        &mut outcome.model,
        &eval_set,
        FusionMode::TopK(1),
        train_cfg.threads,
    )?;
    let summary = TrainSummary {
        model: &model_cfg,
        train: &train_cfg,
        steps: outcome.reports.len(),
        initial_task_loss: outcome.reports.first().map(|r| r.task_loss).unwrap_or(0.0),
        final_task_loss: outcome.reports.last().map(|r| r.task_loss).unwrap_or(0.0),
        final_total_loss: outcome.reports.last().map(|r| r.total).unwrap_or(0.0),
        eval_soft,
        eval_top1,
    };
    std::fs::write(
        args.out.join("summary.txt"),
        serde_json::to_string_pretty(&summary)
            .map_err(|e| Error::InvalidConfig(e.to_string()))?,
    )?;
    println!(
        "trained {} steps; task loss {:.4} -> {:.4}; top-1 accuracy {:.3}; artifacts in {}",
        summary.steps,
        summary.initial_task_loss,
        summary.final_task_loss,
        summary.eval_top1.accuracy,
        args.out.display()
    );
    Ok(())
}

fn parse_mode(mode: &str, k: Option<usize>) -> Result<FusionMode> {
    match mode {
        "soft" => Ok(FusionMode::SoftAll),
        "top1" => Ok(FusionMode::TopK(1)),
        "topk" => Ok(FusionMode::TopK(k.ok_or_else(|| {
            Error::InvalidConfig("--mode topk requires --k".into())
        })?)),
        other => Err(Error::InvalidConfig(format!(
            "unknown mode '{other}' (expected soft | top1 | topk)"
        ))),
    }
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let mode = parse_mode(&args.mode, args.k)?;
    let mut model = checkpoint::load(&args.checkpoint)?;
    let threads = args.threads.unwrap_or(1);
    let cfg = TrainConfig {
        seed: args.seed.unwrap_or(model.config().seed),
        n_eval: args.n_eval.unwrap_or(128),
        threads,
        ..Default::default()
    };
    let scenes = eval_scenes(&cfg);
    let report = evaluate(&mut model, &scenes, mode, threads)?;
    std::fs::create_dir_all(&args.out)?;
    let routing = train::route_dataset(&mut model, &scenes, threads)?;
    routing.write_csv(&args.out.join("routing.csv"))?;
    println!(
        "accuracy {:.4} over {} samples (mode {})",
        report.accuracy, report.samples, args.mode
    );
    println!("selection counts: {:?}", report.selection_counts);
    println!(
        "mean routing probabilities: {:?}",
        report
            .mean_probabilities
            .iter()
            .map(|p| (p * 1e4).round() / 1e4)
            .collect::<Vec<_>>()
    );
    println!("selection entropy: {:.4} bits", report.selection_entropy);
    println!("expert image passes: {}", report.expert_image_passes);
    Ok(())
}

pub fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    let (model_cfg, mut train_cfg) = resolve_common(&args.common)?;
    if let Some(v) = args.epochs {
        train_cfg.epochs = v;
    }
    if let Some(v) = args.batch_size {
        train_cfg.batch_size = v;
    }
    if let Some(v) = args.lr {
        train_cfg.lr = v;
    }
    if let Some(v) = args.n_train {
        train_cfg.n_train = v;
    }
    if let Some(v) = args.n_eval {
        train_cfg.n_eval = v;
    }
    train_cfg.validate()?;
    if args.seeds == 0 {
        return Err(Error::InvalidConfig("--seeds must be positive".into()));
    }
    let lambda_on = args.lambda.unwrap_or(0.01);
    let base_seed = train_cfg.seed;
    let seeds: Vec<u64> = (0..args.seeds as u64).map(|i| base_seed + i).collect();

    std::fs::create_dir_all(&args.out)?;
    let outcome = run_ablation(&model_cfg, &train_cfg, &seeds, lambda_on)?;

    let path = args.out.join("ablation.csv");
    let mut file = std::io::BufWriter::new(std::fs::File::create(&path)?);
    writeln!(file, "seed,lambda,accuracy,selection_entropy,max_expert_share")?;
    for c in &outcome.cells {
        writeln!(
            file,
            "{},{},{:.6},{:.6},{:.6}",
            c.seed, c.lambda, c.accuracy, c.selection_entropy, c.max_expert_share
        )?;
    }
    writeln!(
        file,
        "median,0,{:.6},{:.6},{:.6}",
        outcome.median_accuracy_off, outcome.median_entropy_off, outcome.median_share_off
    )?;
    writeln!(
        file,
        "median,{},{:.6},{:.6},{:.6}",
        lambda_on, outcome.median_accuracy_on, outcome.median_entropy_on, outcome.median_share_on
    )?;
    drop(file);

    outcome
        .routing_off
        .write_csv(&args.out.join("routing_lb_off.csv"))?;
    outcome
        .routing_on
        .write_csv(&args.out.join("routing_lb_on.csv"))?;

    println!("seed  lambda  accuracy  entropy  max_share");
    for c in &outcome.cells {
        println!(
            "{:<5} {:<7} {:<9.4} {:<8.4} {:<9.4}",
            c.seed, c.lambda, c.accuracy, c.selection_entropy, c.max_expert_share
        );
    }
    println!(
        "median entropy: lambda=0 {:.4} vs lambda={} {:.4}",
        outcome.median_entropy_off, lambda_on, outcome.median_entropy_on
    );
    Ok(())
}

pub fn cmd_bench(args: &BenchArgs) -> Result<()> {
    let mut model = match &args.checkpoint {
        Some(path) => checkpoint::load(path)?,
        None => MoeModel::new(&ModelConfig {
            seed: args.seed.unwrap_or(0),
            ..Default::default()
        })?,
    };
    let batch_sizes: Result<Vec<usize>> = args
        .batches
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::InvalidConfig(format!("bad batch size '{s}'")))
        })
        .collect();
    let cfg = BenchConfig {
        batch_sizes: batch_sizes?,
        reps: args.reps,
        threads: args.threads,
        seed: args.seed.unwrap_or(0),
    };
    if cfg.reps == 0 || cfg.batch_sizes.is_empty() {
        return Err(Error::InvalidConfig("bench needs reps > 0 and batch sizes".into()));
    }
    let rows = bench::run_benchmark(&mut model, &cfg)?;
    std::fs::create_dir_all(&args.out)?;
    bench::write_csv(&rows, &args.out.join("bench.csv"))?;
    println!("batch  mode      median_s   passes  speedup");
    for r in &rows {
        println!(
            "{:<6} {:<9} {:<10.6} {:<7} {}",
            r.batch,
            r.mode,
            r.median_seconds,
            r.expert_image_passes,
            r.speedup.map(|s| format!("{s:.2}x")).unwrap_or_default()
        );
    }
    Ok(())
}

/// Entry point used by the binary.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => cmd_train(&args),
        Command::Eval(args) => cmd_eval(&args),
        Command::AblateLb(args) => cmd_ablate(&args),
        Command::Bench(args) => cmd_bench(&args),
    }
}
