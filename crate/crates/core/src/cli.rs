//! Command-line front end: subcommands for training, evaluation, sweeps,
//! prediction with confidence intervals, latent export, and dataset
//! inspection.
//!
//! Exit codes: 0 on success, 2 for configuration/input problems, 1 for
//! runtime failures. Errors print as a single `error: ...` line on stderr.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::harness::{
    evaluate_rmse, export_latent, latent_rows_to_csv, predict_ci, prepare, sweep, train,
    Checkpoint, SweepResult, BENCHMARK_FRACTIONS,
};
use crate::models::ModelKind;

#[derive(Parser)]
#[command(
    name = "ssvaer",
    about = "Semi-supervised variational soft sensor: train, evaluate, sweep, predict",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write checkpoint, metrics, and prediction traces.
    Train(TrainArgs),
    /// Report RMSE of a checkpoint on a split.
    Evaluate(EvaluateArgs),
    /// Train across label fractions and model kinds; emit comparison tables.
    Sweep(SweepArgs),
    /// Write per-row predictions with confidence bounds for a split.
    Predict(PredictArgs),
    /// Export latent coordinates and predictive standard deviations.
    ExportLatent(ExportLatentArgs),
    /// Print dataset dimensions, split sizes, and label counts.
    InspectData(InspectDataArgs),
}

/// Flag overrides that win over config-file values.
#[derive(Args)]
struct Overrides {
    /// Random seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Label fraction in (0, 1].
    #[arg(long)]
    fraction: Option<f64>,
    /// Total training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Model kind: ssvaer, svaer, or fcnn.
    #[arg(long)]
    model: Option<String>,
    /// Output directory for artifacts.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Overrides {
    fn apply(&self, cfg: &mut ExperimentConfig) -> Result<()> {
        if let Some(s) = self.seed {
            cfg.run.seed = s;
        }
        if let Some(f) = self.fraction {
            cfg.run.label_fraction = f;
        }
        if let Some(e) = self.epochs {
            if e == 0 {
                return Err(Error::Config("--epochs must be positive".into()));
            }
            cfg.optim.schedule.total_epochs = e;
            if cfg.optim.schedule.warmup_epochs >= e {
                cfg.optim.schedule.warmup_epochs = e / 5;
            }
        }
        if let Some(m) = &self.model {
            cfg.model.kind = ModelKind::parse(m)?;
        }
        if let Some(o) = &self.out {
            cfg.run.output_dir = o.clone();
        }
        Ok(())
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Experiment configuration file.
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Checkpoint file written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Split to evaluate: train, val, or test.
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Args)]
struct SweepArgs {
    /// Experiment configuration template.
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated model kinds.
    #[arg(long, default_value = "ssvaer,svaer,fcnn")]
    models: String,
    /// Comma-separated label fractions; defaults to the ten benchmark values.
    #[arg(long)]
    fractions: Option<String>,
    /// Comma-separated seeds; defaults to the config seed.
    #[arg(long)]
    seeds: Option<String>,
    /// Parallel training cells.
    #[arg(long, default_value_t = default_jobs())]
    jobs: usize,
    #[command(flatten)]
    overrides: Overrides,
}

fn default_jobs() -> usize {
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}

#[derive(Args)]
struct PredictArgs {
    /// Checkpoint file written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Split to predict: train, val, or test.
    #[arg(long, default_value = "test")]
    split: String,
    /// Confidence level in (0, 1).
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    /// Output file (defaults to predictions.csv next to the checkpoint).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportLatentArgs {
    /// Checkpoint file written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Split to export: train, val, or test.
    #[arg(long, default_value = "test")]
    split: String,
    /// Output file (defaults to latent.csv next to the checkpoint).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InspectDataArgs {
    /// Experiment configuration file.
    #[arg(long)]
    config: PathBuf,
}

/// Parse argv and run; returns the process exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage_error() {
                2
            } else {
                1
            }
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Predict(args) => cmd_predict(args),
        Command::ExportLatent(args) => cmd_export_latent(args),
        Command::InspectData(args) => cmd_inspect(args),
    }
}

fn write_file(path: &std::path::Path, content: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        }
    }
    std::fs::write(path, content).map_err(|e| Error::io(path.display().to_string(), e))
}

fn split_of<'a>(
    data: &'a crate::harness::PreparedData,
    name: &str,
) -> Result<&'a crate::harness::SplitData> {
    match name {
        "train" => Ok(&data.train),
        "val" => Ok(&data.val),
        "test" => Ok(&data.test),
        other => Err(Error::Invalid(format!(
            "unknown split `{other}` (expected train, val, or test)"
        ))),
    }
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    args.overrides.apply(&mut cfg)?;

    let out = train(&cfg)?;
    let dir = out.checkpoint.config.run.output_dir.clone();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;

    // Echo the fully resolved config, and persist it next to the artifacts so
    // the run is reproducible from the directory alone.
    let resolved_text = out.checkpoint.config.serialize();
    print!("{resolved_text}");
    write_file(&dir.join("resolved.conf"), &resolved_text)?;

    out.checkpoint.save(&dir.join("checkpoint.txt"))?;
    out.metrics.write(&dir.join("metrics.csv"))?;

    // Prediction trace with confidence bounds on the test split.
    let (data, _) = prepare(&out.checkpoint.config)?;
    let rows = predict_ci(&out.checkpoint.model, &data.test.x, &out.checkpoint.standardizer, 0.95)?;
    write_file(&dir.join("ci_test.csv"), &ci_rows_to_csv(&rows, &data.test.y_raw))?;

    println!("best_epoch = {}", out.checkpoint.best_epoch);
    println!("best_val_loss = {}", out.checkpoint.best_val_loss);
    println!("test_rmse = {}", out.metrics.test_rmse.unwrap_or(f64::NAN));
    println!("artifacts = {}", dir.display());
    Ok(())
}

fn ci_rows_to_csv(rows: &[crate::harness::CiRow], truth: &[f64]) -> String {
    let mut s = String::from("index,truth,prediction,lower,upper\n");
    for (i, r) in rows.iter().enumerate() {
        let t = truth.get(i).copied().unwrap_or(f64::NAN);
        s.push_str(&format!("{},{},{},{},{}\n", i, t, r.mean, r.lower, r.upper));
    }
    s
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let checkpoint = Checkpoint::load(&args.checkpoint)?;
    let rmse = evaluate_rmse(&checkpoint, &args.split)?;
    println!("rmse = {rmse}");
    Ok(())
}

fn parse_kinds(s: &str) -> Result<Vec<ModelKind>> {
    s.split(',')
        .map(|k| ModelKind::parse(k.trim()))
        .collect()
}

fn parse_f64_list(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("`{x}` is not a number")))
        })
        .collect()
}

fn parse_u64_list(s: &str) -> Result<Vec<u64>> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse::<u64>()
                .map_err(|_| Error::Config(format!("`{x}` is not a seed")))
        })
        .collect()
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    args.overrides.apply(&mut cfg)?;

    let kinds = parse_kinds(&args.models)?;
    let fractions = match &args.fractions {
        Some(s) => parse_f64_list(s)?,
        None => BENCHMARK_FRACTIONS.to_vec(),
    };
    let seeds = match &args.seeds {
        Some(s) => parse_u64_list(s)?,
        None => vec![cfg.run.seed],
    };

    let result: SweepResult = sweep(&cfg, &kinds, &fractions, &seeds, args.jobs)?;

    let dir = cfg.run.output_dir.clone();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    write_file(&dir.join("resolved.conf"), &cfg.serialize())?;
    let table = result.table_csv();
    write_file(&dir.join("sweep_table.csv"), &table)?;
    write_file(&dir.join("sweep_points.csv"), &result.plot_csv())?;
    print!("{table}");
    println!("artifacts = {}", dir.display());
    Ok(())
}

fn cmd_predict(args: PredictArgs) -> Result<()> {
    let checkpoint = Checkpoint::load(&args.checkpoint)?;
    let (data, _) = prepare(&checkpoint.config)?;
    let split = split_of(&data, &args.split)?;
    let rows = predict_ci(&checkpoint.model, &split.x, &checkpoint.standardizer, args.level)?;
    let csv = ci_rows_to_csv(&rows, &split.y_raw);
    let out = args.out.unwrap_or_else(|| {
        args.checkpoint
            .parent()
            .unwrap_or(std::path::Path::new("."))
            .join("predictions.csv")
    });
    write_file(&out, &csv)?;
    println!("wrote {} rows to {}", rows.len(), out.display());
    Ok(())
}

fn cmd_export_latent(args: ExportLatentArgs) -> Result<()> {
    let checkpoint = Checkpoint::load(&args.checkpoint)?;
    let (data, _) = prepare(&checkpoint.config)?;
    let split = split_of(&data, &args.split)?;
    let rows = export_latent(
        &checkpoint.model,
        &split.x,
        Some(&split.y_raw),
        &checkpoint.standardizer,
    )?;
    let out = args.out.unwrap_or_else(|| {
        args.checkpoint
            .parent()
            .unwrap_or(std::path::Path::new("."))
            .join("latent.csv")
    });
    write_file(&out, &latent_rows_to_csv(&rows))?;
    println!("wrote {} rows to {}", rows.len(), out.display());
    Ok(())
}

fn cmd_inspect(args: InspectDataArgs) -> Result<()> {
    let cfg = ExperimentConfig::load(&args.config)?;
    let (data, resolved) = prepare(&cfg)?;
    println!("dataset = {}", resolved.dataset.name.name());
    println!("input_width = {}", data.input_width);
    let usable = data.train.x.rows + data.val.x.rows + data.test.x.rows;
    println!("usable_rows = {usable}");
    println!(
        "split = {}/{}/{}",
        data.train.x.rows, data.val.x.rows, data.test.x.rows
    );
    let count = |m: &[bool]| m.iter().filter(|&&b| b).count();
    println!(
        "labelled = train {} of {}, val {} of {}",
        count(&data.train.labelled),
        data.train.x.rows,
        count(&data.val.labelled),
        data.val.x.rows
    );
    println!("label_fraction = {}", resolved.run.label_fraction);
    Ok(())
}
