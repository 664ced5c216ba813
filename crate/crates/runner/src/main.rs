//! `slowfast` — experiment CLI.
//!
//! Exit codes: 0 success, 1 configuration/I-O error, 2 numerical failure
//! (divergence or non-finite gradients). The output root is `--out` when
//! given, else `$SLOWFAST_OUT`, else the config's `experiment.output_dir`,
//! else `./runs`.

use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use slowfast_core::probe::InterventionKind;
use slowfast_runner::config::{load_config, resolve_output_root, RunnerConfig};
use slowfast_runner::experiment::{ensure_pretrained, run_experiment};
use slowfast_runner::report::report;
use slowfast_runner::sweep::{run_grid, run_probe_sweep, GridAxis};
use slowfast_runner::{Result, RunnerError};

#[derive(Parser)]
#[command(name = "slowfast", about = "Phase- and layer-dependent learning-rate experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Path to the experiment TOML.
    #[arg(long)]
    config: PathBuf,
    /// Override a config key, e.g. `--set policy.c1=0.1` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output root directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<(RunnerConfig, PathBuf)> {
        let cfg = load_config(&self.config, &self.set)?;
        let root = resolve_output_root(self.out.as_deref(), &cfg);
        Ok((cfg, root))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Pre-train (or reuse) the cached checkpoint for every seed.
    Pretrain(ConfigArgs),
    /// Run the full pipeline: pretrain, intervene, fine-tune, evaluate.
    Finetune(ConfigArgs),
    /// Freeze or re-initialize one layer at a time and compare.
    Probe {
        #[command(flatten)]
        config: ConfigArgs,
        /// `freeze` or `reinitialize`.
        #[arg(long)]
        kind: String,
        /// 1-based layers to probe, e.g. `--layers 1,2,3`. Empty sweeps
        /// every layer of the model.
        #[arg(long, value_delimiter = ',')]
        layers: Vec<u32>,
    },
    /// Sweep one hyper-parameter axis (c1, c2, r_exp or m).
    Grid {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        axis: String,
        /// Grid values, e.g. `--values 0.5,0.1,0.01`; defaults to the
        /// axis's published grid.
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
    },
    /// Verify and print the summary of an experiment directory.
    Report {
        /// Experiment directory containing summary.json.
        #[arg(long)]
        dir: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain(args) => {
            let (cfg, root) = args.load()?;
            for path in ensure_pretrained(&cfg, &root)? {
                println!("{}", path.display());
            }
        }
        Command::Finetune(args) => {
            let (cfg, root) = args.load()?;
            let summary = run_experiment(&cfg, &root)?;
            print!("{}", slowfast_runner::report::render(&summary));
        }
        Command::Probe { config, kind, layers } => {
            let (cfg, root) = config.load()?;
            let kind = InterventionKind::from_str(&kind)
                .map_err(|e| RunnerError::config(e.to_string()))?;
            let layers = if layers.is_empty() {
                (1..=cfg.model.num_layers as u32).collect()
            } else {
                layers
            };
            let rows = run_probe_sweep(&cfg, kind, &layers, &root)?;
            println!("layer       source  non_source      gap");
            for r in &rows {
                let label = r.layer.map(|l| l.to_string()).unwrap_or_else(|| "baseline".into());
                println!(
                    "{label:<10} {:>7.2} {:>11.2} {:>8.2}",
                    r.mean_source, r.mean_non_source, r.mean_gap
                );
            }
        }
        Command::Grid { config, axis, values } => {
            let (cfg, root) = config.load()?;
            let axis = GridAxis::from_str(&axis)?;
            let values = if values.is_empty() { axis.default_values() } else { values };
            let rows = run_grid(&cfg, axis, &values, &root)?;
            println!("{axis:<10}  source  non_source      gap");
            for r in &rows {
                println!(
                    "{:<10} {:>7.2} {:>11.2} {:>8.2}",
                    r.value, r.summary.mean_source, r.summary.mean_non_source, r.summary.mean_gap
                );
            }
        }
        Command::Report { dir } => {
            print!("{}", report(&dir)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
