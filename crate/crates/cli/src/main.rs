//! `nitromap` — command-line front end for the prescription-map pipeline.
//!
//! Each subcommand runs one stage against a JSON configuration file.
//! Trailing `--<dotted.path> <value>` pairs override configuration fields,
//! e.g. `--train.learning_rate 0.01 --model.variant small`. Values parse as
//! JSON where possible and fall back to strings.
//!
//! Exit codes: 0 success, 1 runtime error, 2 usage or dependency error.
//! Errors print a single machine-parseable JSON line on stderr.

use clap::{Args, Parser, Subcommand};
use nitromap_core::pipeline::{
    run_eval, run_green_report, run_prep, run_render, run_synth, run_train, PipelineError,
    RunConfig, StagePaths,
};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Environment variable naming the default output root.
const OUTPUT_ENV: &str = "NITROMAP_OUT";

#[derive(Parser)]
#[command(
    name = "nitromap",
    version,
    about = "Nitrogen prescription-map pipeline: synthetic scenes, patch prep, U-Net training, \
             evaluation, rendering, and energy accounting",
    after_help = "Config overrides: append `--<dotted.path> <value>` pairs after the flags, \
                  e.g. `nitromap train --config run.json --model.variant small \
                  --train.max_epochs 20`."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct StageArgs {
    /// Path to the JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output root; falls back to the config's output_dir, then $NITROMAP_OUT.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Flattened config overrides as `--<dotted.path> <value>` pairs.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, hide = true)]
    overrides: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    stage: StageArgs,
    /// Estimate energy as wall time × this device power instead of the
    /// config's energy source.
    #[arg(long)]
    power_watts: Option<f64>,
}

#[derive(Args)]
struct GreenArgs {
    #[command(flatten)]
    stage: StageArgs,
    /// Variants to include; defaults to every trained variant found.
    #[arg(long, value_delimiter = ',')]
    variants: Option<Vec<String>>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and manifest.
    Synth(StageArgs),
    /// Filter outliers, extract patches, split, and fit the standardizer.
    Prep(StageArgs),
    /// Train the configured model variant.
    Train(TrainArgs),
    /// Evaluate a trained checkpoint on the test partition.
    Eval(StageArgs),
    /// Render actual/predicted PGM pairs for the reconstructed maps.
    Render(StageArgs),
    /// Build the energy/CO2 report from train reports.
    GreenReport(GreenArgs),
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Pipeline(PipelineError),
}

impl CliError {
    fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Usage(_) => ExitCode::from(2),
            CliError::Pipeline(e) if e.is_usage() => ExitCode::from(2),
            CliError::Pipeline(_) => ExitCode::from(1),
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Pipeline(e) if e.is_usage() => "dependency",
            CliError::Pipeline(_) => "runtime",
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Usage(msg) => msg.clone(),
            CliError::Pipeline(e) => e.to_string(),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        CliError::Pipeline(e)
    }
}

/// Apply `--a.b.c value` pairs onto the config's JSON tree. Values parse as
/// JSON scalars when possible, else as strings.
fn apply_overrides(
    mut tree: serde_json::Value,
    overrides: &[String],
) -> Result<serde_json::Value, CliError> {
    if overrides.len() % 2 != 0 {
        return Err(CliError::Usage(format!(
            "overrides must come in `--path value` pairs, got {overrides:?}"
        )));
    }
    for pair in overrides.chunks(2) {
        let key = pair[0]
            .strip_prefix("--")
            .ok_or_else(|| CliError::Usage(format!("override key '{}' must start with --", pair[0])))?;
        let value: serde_json::Value = serde_json::from_str(&pair[1])
            .unwrap_or_else(|_| serde_json::Value::String(pair[1].clone()));
        let segments: Vec<&str> = key.split('.').collect();
        let (last, parents) = segments.split_last().expect("split produces a segment");
        let mut node = &mut tree;
        for segment in parents {
            let obj = node.as_object_mut().ok_or_else(|| {
                CliError::Usage(format!("override path '{key}' does not address an object"))
            })?;
            node = obj
                .entry((*segment).to_string())
                .or_insert_with(|| serde_json::Value::Object(Default::default()));
        }
        let obj = node.as_object_mut().ok_or_else(|| {
            CliError::Usage(format!("override path '{key}' does not address an object"))
        })?;
        obj.insert((*last).to_string(), value);
    }
    Ok(tree)
}

fn load_config(args: &StageArgs) -> Result<(RunConfig, PathBuf), CliError> {
    if !args.config.exists() {
        return Err(CliError::Usage(format!(
            "config file '{}' does not exist",
            args.config.display()
        )));
    }
    let raw = std::fs::read_to_string(&args.config)
        .map_err(|e| CliError::Usage(format!("cannot read config: {e}")))?;
    let tree: serde_json::Value =
        serde_json::from_str(&raw).map_err(|e| CliError::Usage(format!("config is not JSON: {e}")))?;
    let tree = apply_overrides(tree, &args.overrides)?;
    let config = RunConfig::from_json(&tree.to_string()).map_err(|e| match e {
        e @ PipelineError::InvalidConfig(_) => CliError::Pipeline(e),
        PipelineError::Json(e) => CliError::Usage(format!("config does not validate: {e}")),
        other => CliError::Pipeline(other),
    })?;

    let root = args
        .out
        .clone()
        .or_else(|| config.output_dir.as_ref().map(PathBuf::from))
        .or_else(|| std::env::var_os(OUTPUT_ENV).map(PathBuf::from))
        .ok_or_else(|| {
            CliError::Usage(format!(
                "no output root: pass --out, set output_dir in the config, or set ${OUTPUT_ENV}"
            ))
        })?;
    Ok((config, root))
}

/// Trained variants under `<root>/train`, sorted by name.
fn discover_variants(root: &Path) -> Vec<String> {
    let mut variants: Vec<String> = std::fs::read_dir(root.join("train"))
        .map(|entries| {
            entries
                .filter_map(|e| e.ok())
                .filter(|e| e.path().join("train_report.json").exists())
                .filter_map(|e| e.file_name().into_string().ok())
                .collect()
        })
        .unwrap_or_default();
    variants.sort();
    variants
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Synth(args) => {
            let (config, root) = load_config(&args)?;
            let manifest = run_synth(&config, &root)?;
            println!(
                "synth: {} scenes -> {}",
                manifest.scenes.len(),
                StagePaths::new(&root).dataset_dir().display()
            );
        }
        Command::Prep(args) => {
            let (config, root) = load_config(&args)?;
            let summary = run_prep(&config, &root)?;
            println!(
                "prep: {} patches ({} train / {} validation / {} test), {} scene(s) dropped",
                summary.total_patches,
                summary.train_patches,
                summary.validation_patches,
                summary.test_patches,
                summary.dropped_parcels.len()
            );
        }
        Command::Train(args) => {
            let (mut config, root) = load_config(&args.stage)?;
            if let Some(watts) = args.power_watts {
                config.energy.source =
                    nitromap_core::train::EnergySource::Estimated { power_watts: watts };
            }
            let report = run_train(&config, &root, |epoch| {
                println!(
                    "epoch {:>4}  train {:.6}  validation {:.6}  stale {}",
                    epoch.epoch,
                    epoch.train_loss,
                    epoch.validation_loss,
                    epoch.epochs_since_improvement
                );
            })?;
            println!(
                "train: {} stopped after epoch {} ({:?}), best validation {:.6} at epoch {}, \
                 {:.1}s, {:.0} J ({:?})",
                report.variant,
                report.epochs.len(),
                report.stop_reason,
                report.best_validation_loss,
                report.best_epoch,
                report.wall_seconds,
                report.energy.joules,
                report.energy.source
            );
        }
        Command::Eval(args) => {
            let (config, root) = load_config(&args)?;
            let metrics = run_eval(&config, &root)?;
            println!(
                "eval: {} patch RMSE {:.3} MAPE {:.2}% SMAPE {:.2}% | map RMSE {:.3} MAPE {:.2}% \
                 SMAPE {:.2}% over {} map(s)",
                metrics.variant,
                metrics.patch.rmse,
                metrics.patch.mape_percent,
                metrics.patch.smape_percent,
                metrics.map_pooled.rmse,
                metrics.map_pooled.mape_percent,
                metrics.map_pooled.smape_percent,
                metrics.per_map.len()
            );
        }
        Command::Render(args) => {
            let (config, root) = load_config(&args)?;
            let rendered = run_render(&config, &root)?;
            println!(
                "render: {} actual/predicted pair(s) -> {}",
                rendered.len(),
                StagePaths::new(&root)
                    .render_dir(&config.model.variant)
                    .display()
            );
        }
        Command::GreenReport(args) => {
            let (config, root) = load_config(&args.stage)?;
            let variants = match args.variants {
                Some(v) => v,
                None => discover_variants(&root),
            };
            let report = run_green_report(&config, &root, &variants)?;
            for row in &report.rows {
                println!(
                    "green: {:>9}  {:>10.0} J  {:.4e} kWh  savings {}  CO2e {}  gain {:+.2}%",
                    row.variant,
                    row.joules,
                    row.kwh,
                    row.savings_vs_next_larger_kwh
                        .map(|v| format!("{v:.4e} kWh"))
                        .unwrap_or_else(|| "-".into()),
                    row.co2e_savings_grams
                        .map(|v| format!("{v:.3} g"))
                        .unwrap_or_else(|| "-".into()),
                    row.efficiency_gain_vs_baseline_percent
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let diagnostic = serde_json::json!({
                "error": err.kind(),
                "message": err.message(),
            });
            eprintln!("{diagnostic}");
            err.exit_code()
        }
    }
}
