use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};
use groupdetr_lab::commands::{cmd_diagnose, cmd_eval, cmd_generate, cmd_sweep, cmd_train, load_config, Overrides};
use groupdetr_lab::sweep::{Axis, DEFAULT_GROUPS};
use serde::Serialize;

#[derive(Parser)]
#[command(
    name = "grouplab",
    version,
    about = "Label-assignment experiments on synthetic scenes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run config; defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Group-wise assignment with this many groups.
    #[arg(long)]
    k: Option<usize>,
    /// One-to-many assignment with this many positives per object.
    #[arg(long)]
    multiplicity: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            out: self.out.clone(),
            k: self.k,
            multiplicity: self.multiplicity,
            epochs: self.epochs,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    K,
    Multiplicity,
    Queries,
}

#[derive(Subcommand)]
enum Command {
    /// Write train/val scene files.
    Generate(Common),
    /// Train one model per seed.
    Train(Common),
    /// Evaluate a checkpoint on the validation split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to the latest checkpoint under the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Scene file to evaluate on instead of the configured validation split.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        group_index: usize,
        #[arg(long)]
        no_nms: bool,
    },
    /// Train across an axis of strategy settings and seeds.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "k")]
        axis: AxisArg,
        /// Comma-separated axis values; defaults to 1,2,3,5,7,11 for k.
        #[arg(long, value_delimiter = ',')]
        values: Vec<usize>,
    },
    /// PD/MD series and query positions from a run's checkpoints. Takes the
    /// run directory via --out, or resolves it from --config like eval.
    Diagnose {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
}

fn print<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(c) => print(&cmd_generate(&load_config(c.config.as_deref(), &c.overrides())?)?),
        Command::Train(c) => print(&cmd_train(&load_config(c.config.as_deref(), &c.overrides())?)?),
        Command::Eval {
            common,
            checkpoint,
            dataset,
            group_index,
            no_nms,
        } => {
            let cfg = load_config(common.config.as_deref(), &common.overrides())?;
            print(&cmd_eval(
                &cfg,
                checkpoint.as_deref(),
                dataset.as_deref(),
                group_index,
                !no_nms,
            )?)
        }
        Command::Sweep { common, axis, values } => {
            let cfg = load_config(common.config.as_deref(), &common.overrides())?;
            let axis = match axis {
                AxisArg::K => Axis::Groups,
                AxisArg::Multiplicity => Axis::Multiplicity,
                AxisArg::Queries => Axis::Queries,
            };
            let values = match (values.is_empty(), axis) {
                (true, Axis::Groups) => DEFAULT_GROUPS.to_vec(),
                (true, _) => anyhow::bail!("--values is required for the {} axis", axis.name()),
                (false, _) => values,
            };
            let report = cmd_sweep(&cfg, axis, &values)?;
            print(&(&report.summaries, report.k3_beats_k1))
        }
        Command::Diagnose { common, dataset } => {
            let run = match (&common.out, &common.config) {
                (Some(out), None) => out.clone(),
                (_, Some(_)) => {
                    let cfg = load_config(common.config.as_deref(), &common.overrides())?;
                    cfg.run_dir(cfg.seed())
                }
                (None, None) => anyhow::bail!("give --out <run directory> or --config"),
            };
            print(&cmd_diagnose(&run, dataset.as_deref())?)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({ "error": format!("{e:#}") });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
