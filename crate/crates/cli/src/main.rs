use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use freqmoe::config::RunConfig;
use freqmoe::data::SyntheticSpec;
use freqmoe::evaluation::MetricReport;
use freqmoe::{Error, Result};
use freqmoe_cli::{
    cmd_eval, cmd_gatetrace, cmd_report, cmd_sweep, cmd_synth, cmd_train, exit_code, load_config, Overrides,
    SweepAxis,
};

#[derive(Parser)]
#[command(name = "freqmoe", version, about = "Frequency-band mixture-of-experts forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Accept hyperparameters outside the standard grid.
    #[arg(long)]
    allow_offgrid: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes a checkpoint and history CSV.
    Train {
        #[command(flatten)]
        common: Common,
        /// Output directory.
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Checkpoint path (default: OUT/model.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset CSV to use instead of the one in the checkpoint.
        #[arg(long)]
        dataset: Option<String>,
        /// Expected forecast horizon.
        #[arg(long)]
        horizon: Option<usize>,
        /// Metrics CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the synthetic benchmark series as CSV.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model per value of an axis and compare test metrics.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        axis: Axis,
        /// Comparison CSV; existing rows are kept and skipped.
        #[arg(long)]
        out: PathBuf,
        /// Train pending values concurrently.
        #[arg(long)]
        parallel: bool,
    },
    /// Print parameter and MAC counts without training.
    Report {
        #[command(flatten)]
        common: Common,
        /// Channel count for MACs (default: from the dataset).
        #[arg(long)]
        channels: Option<usize>,
    },
    /// Export per-window gate weights and band layout of a checkpoint.
    Gatetrace {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    Experts,
    Blocks,
}

fn config_of(common: &Common) -> Result<RunConfig> {
    let overrides = Overrides {
        seed: common.seed,
        allow_offgrid: common.allow_offgrid,
    };
    let path = common.config.as_ref().ok_or_else(|| Error::Config {
        field: "--config".into(),
        message: "a configuration file is required".into(),
    })?;
    load_config(path, overrides)
}

fn print_metrics(report: &MetricReport) {
    println!("{report}");
    println!("{}", MetricReport::csv_header());
    println!("{}", report.csv_row());
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { common, out, checkpoint } => {
            let cfg = config_of(&common)?;
            let artifacts = cmd_train(&cfg, &out, checkpoint.as_deref(), &mut std::io::stderr())?;
            println!("checkpoint {}", artifacts.checkpoint.display());
            println!("history {}", artifacts.history.display());
            println!("val_mse {}", artifacts.best_val_mse);
        }
        Command::Eval {
            checkpoint,
            dataset,
            horizon,
            out,
        } => {
            let report = cmd_eval(&checkpoint, dataset.as_deref(), horizon)?;
            print_metrics(&report);
            if let Some(out) = out {
                report.write_csv(out)?;
            }
        }
        Command::Synth { common, out } => {
            let mut spec = match &common.config {
                Some(_) => config_of(&common)?.data.synthetic,
                None => SyntheticSpec::default(),
            };
            if let Some(seed) = common.seed {
                spec.seed = seed;
            }
            cmd_synth(&spec, &out)?;
            println!("wrote {} rows to {}", spec.total_len, out.display());
        }
        Command::Sweep {
            common,
            axis,
            out,
            parallel,
        } => {
            let cfg = config_of(&common)?;
            let axis = match axis {
                Axis::Experts => SweepAxis::Experts,
                Axis::Blocks => SweepAxis::Blocks,
            };
            let rows = cmd_sweep(&cfg, axis, &out, parallel, &mut std::io::stderr())?;
            for row in rows {
                println!("{},{},{}", row.value, row.mse, row.mae);
            }
        }
        Command::Report { common, channels } => {
            let cfg = config_of(&common)?;
            println!("{}", cmd_report(&cfg, channels)?);
        }
        Command::Gatetrace { checkpoint, dataset, out } => {
            let trace = cmd_gatetrace(&checkpoint, dataset.as_deref(), &out)?;
            println!("{} windows written to {}", trace.weights.len(), out.display());
            for (i, (m, w)) in trace.mean_coeff.iter().zip(&trace.bandwidths).enumerate() {
                println!("expert {i}: mean weight {m:.4}, bandwidth {w:.4}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // Usage errors are configuration errors; help and version are not errors.
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
