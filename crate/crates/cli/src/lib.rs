//! Command-line driver for the joint translation/segmentation experiments.
//!
//! Every command reads one [`ExperimentConfig`], writes below its output
//! directory and refreshes `manifest.toml` there.

pub mod commands;
pub mod config;
pub mod error;
pub mod layout;
pub mod manifest;
pub mod preview;

use std::ffi::OsString;
use std::path::PathBuf;
use std::time::Instant;

use adverseg_core::Scalar;
use clap::{Args, Parser, Subcommand};

pub use config::{ExperimentConfig, MethodName, Precision};
pub use error::{CliError, CliResult};
pub use layout::Layout;

use commands::evaluate::{evaluate, EvaluateOptions};
use commands::generate::generate;
use commands::sweep::{mean_dice, sweep};
use commands::train::{train_run, TrainOptions};
use commands::translate::{translate, Direction, TranslateOptions};
use layout::{Dataset, DatasetInfo};
use manifest::{sha256_hex, RunManifest, Timing};

#[derive(Debug, Parser)]
#[command(name = "adverseg", version, about = "Synthetic-domain adversarial segmentation experiments")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Experiment configuration (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed, overriding the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory, overriding the configuration.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    pub force: bool,
    /// Floating-point precision, overriding the configuration.
    #[arg(long, global = true, value_enum)]
    pub precision: Option<Precision>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the reference and target domains and their split.
    Generate,
    /// Train one or more methods on the generated dataset.
    Train {
        /// Methods to train; defaults to the configured list.
        #[arg(long, value_enum)]
        method: Vec<MethodName>,
        /// Continue from the last checkpoint of an interrupted run.
        #[arg(long)]
        resume: bool,
        /// Stop after this many iterations, keeping a resumable checkpoint.
        #[arg(long)]
        max_iterations: Option<u64>,
    },
    /// Score trained methods on the target test split.
    Evaluate {
        /// Methods to score; defaults to the configured list.
        #[arg(long, value_enum)]
        method: Vec<MethodName>,
        /// Also score the ground truth against itself.
        #[arg(long)]
        ground_truth: bool,
    },
    /// Retrain the joint model for each configured segmentation weight.
    Sweep {
        #[arg(long)]
        resume: bool,
        /// Train the pending weights concurrently, one thread each.
        #[arg(long)]
        parallel: bool,
    },
    /// Translate images with a trained generator.
    Translate {
        #[arg(long, value_enum, default_value = "susan")]
        method: MethodName,
        #[arg(long, value_enum)]
        direction: Direction,
        /// Stored image stacks (`*.image.susn`); defaults to the hold-out split.
        #[arg(long)]
        input: Vec<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Generate => "generate",
            Command::Train { .. } => "train",
            Command::Evaluate { .. } => "evaluate",
            Command::Sweep { .. } => "sweep",
            Command::Translate { .. } => "translate",
        }
    }
}

/// Configuration after applying command-line overrides.
pub fn resolve_config(g: &GlobalArgs) -> CliResult<ExperimentConfig> {
    let mut cfg = match &g.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(o) = &g.out {
        cfg.out = o.clone();
    }
    if let Some(p) = g.precision {
        cfg.precision = p;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn methods(requested: &[MethodName], cfg: &ExperimentConfig) -> Vec<MethodName> {
    if requested.is_empty() {
        cfg.methods.clone()
    } else {
        requested.to_vec()
    }
}

fn dispatch<T: Scalar>(cfg: &ExperimentConfig, layout: &Layout, force: bool, command: &Command) -> CliResult<()> {
    match command {
        Command::Generate => {
            let s = generate(cfg, layout, force)?;
            println!(
                "generated {} reference and {} target subjects in {} (content {})",
                s.reference_subjects,
                s.target_subjects,
                layout.data().display(),
                &s.content_hash[..16]
            );
        }
        Command::Train {
            method,
            resume,
            max_iterations,
        } => {
            let data = Dataset::load(layout, cfg)?;
            let opts = TrainOptions {
                force,
                resume: *resume,
                max_iterations: *max_iterations,
            };
            for m in methods(method, cfg) {
                let s = train_run::<T>(cfg, &data, m, cfg.train.lambda_seg, &layout.run(m), opts)?;
                match (s.complete, s.best_val) {
                    (true, Some(v)) => println!(
                        "{m}: {} iterations, best validation loss {v:.6} at iteration {}",
                        s.iterations,
                        s.best_iteration.unwrap_or(0)
                    ),
                    _ => println!("{m}: stopped at iteration {}; rerun with --resume", s.iterations),
                }
            }
        }
        Command::Evaluate { method, ground_truth } => {
            let opts = EvaluateOptions {
                methods: methods(method, cfg),
                ground_truth: *ground_truth,
            };
            for r in evaluate::<T>(cfg, layout, &opts)? {
                println!("{}: mean Dice {:.4} over {} subjects", r.method, mean_dice(&r), r.subjects.len());
            }
            println!("reports written to {}", layout.eval().display());
        }
        Command::Sweep { resume, parallel } => {
            let opts = TrainOptions {
                force,
                resume: *resume,
                max_iterations: None,
            };
            for row in sweep::<T>(cfg, layout, opts, *parallel)? {
                println!("lambda_seg {}: mean Dice {:.4}", row.lambda_seg, mean_dice(&row.report));
            }
        }
        Command::Translate {
            method,
            direction,
            input,
        } => {
            let opts = TranslateOptions {
                method: *method,
                direction: *direction,
                inputs: input.clone(),
                force,
            };
            let done = translate::<T>(cfg, layout, &opts)?;
            println!(
                "translated {} inputs into {}",
                done.len(),
                layout.translate(direction.as_str()).display()
            );
        }
    }
    Ok(())
}

/// Runs a parsed command and refreshes the output manifest.
pub fn execute(cli: &Cli) -> CliResult<()> {
    let cfg = resolve_config(&cli.global)?;
    let layout = Layout::new(&cfg.out);
    let start = Instant::now();
    match cfg.precision {
        Precision::F32 => dispatch::<f32>(&cfg, &layout, cli.global.force, &cli.command)?,
        Precision::F64 => dispatch::<f64>(&cfg, &layout, cli.global.force, &cli.command)?,
    }
    let dataset_hash = std::fs::read_to_string(layout.dataset_info())
        .ok()
        .and_then(|t| toml::from_str::<DatasetInfo>(&t).ok())
        .map(|i| i.content_hash);
    RunManifest::refresh(
        &layout.out,
        &sha256_hex(cfg.canonical().as_bytes()),
        dataset_hash,
        Timing {
            command: cli.command.name().to_string(),
            seconds: start.elapsed().as_secs_f64(),
        },
    )?;
    Ok(())
}

/// Parses `args` and runs them, returning the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
