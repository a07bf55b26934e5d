use std::path::PathBuf;

use bedma::check::Fault;
use bedma_cli::commands::{
    cmd_benchmark, cmd_evaluate, cmd_gradcheck, cmd_predict, cmd_train, EvaluateSpec, PredictSpec,
};
use bedma_cli::{CliError, Overrides, RunConfig};
use clap::{Args, Parser, Subcommand};

/// Bayesian encoder-decoder forecaster with multi-head attention.
#[derive(Parser)]
#[command(name = "bedma", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every data-touching subcommand.
#[derive(Args, Clone)]
struct CommonArgs {
    /// TOML run configuration; flags below override its fields
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed for data, initialization, and sampling
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// CSV series file (switches the data source to csv)
    #[arg(long)]
    data: Option<PathBuf>,
    /// Road id to select from the CSV
    #[arg(long)]
    road: Option<String>,
}

impl CommonArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            out: self.out.clone(),
            data: self.data.clone(),
            road: self.road.clone(),
            ..Overrides::default()
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Model variant: gru-ed, bgru-ed, mhatt, or bedma
        #[arg(long)]
        variant: Option<String>,
        /// Input window length in steps
        #[arg(long)]
        window: Option<usize>,
        /// Forecast horizon in steps
        #[arg(long)]
        horizon: Option<usize>,
        /// Training epoch cap
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score a checkpoint on the held-out span
    Evaluate {
        /// Checkpoint written by `train`
        checkpoint: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
        /// Horizon steps to score, comma separated; default is every
        /// step up to the trained horizon
        #[arg(long, value_delimiter = ',')]
        horizon: Vec<usize>,
        /// Posterior draws per forecast; 1 scores the posterior means
        #[arg(long, default_value_t = 1)]
        n_mc: usize,
    },
    /// Forecast the next horizon from the latest observations
    Predict {
        /// Checkpoint written by `train`
        checkpoint: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
        /// Posterior draws behind the mean and two-sigma band
        #[arg(long, default_value_t = 30)]
        n_mc: usize,
    },
    /// Train and score every variant on one dataset
    Benchmark {
        #[command(flatten)]
        common: CommonArgs,
        /// Training runs per variant
        #[arg(long)]
        repeats: Option<usize>,
    },
    /// Verify analytic gradients against finite differences
    Gradcheck {
        /// Deliberately corrupt one derivative to prove the check bites
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train {
            common,
            variant,
            window,
            horizon,
            epochs,
        } => {
            let overrides = Overrides {
                variant,
                window,
                horizon,
                epochs,
                ..common.overrides()
            };
            let cfg = RunConfig::load(common.config.as_deref(), &overrides)?;
            let outcome = cmd_train(&cfg)?;
            print!("{}", outcome.summary);
            Ok(())
        }
        Command::Evaluate {
            checkpoint,
            common,
            horizon,
            n_mc,
        } => {
            let cfg = RunConfig::load(common.config.as_deref(), &common.overrides())?;
            let spec = EvaluateSpec {
                checkpoint,
                out: common.out.clone(),
                cfg,
                horizons: horizon,
                n_mc,
            };
            print!("{}", cmd_evaluate(&spec)?);
            Ok(())
        }
        Command::Predict {
            checkpoint,
            common,
            n_mc,
        } => {
            let cfg = RunConfig::load(common.config.as_deref(), &common.overrides())?;
            let spec = PredictSpec {
                checkpoint,
                out: common.out.clone(),
                cfg,
                n_mc,
            };
            print!("{}", cmd_predict(&spec)?);
            Ok(())
        }
        Command::Benchmark { common, repeats } => {
            let mut cfg = RunConfig::load(common.config.as_deref(), &common.overrides())?;
            if let Some(repeats) = repeats {
                cfg.benchmark.repeats = repeats;
            }
            cfg.validate()?;
            let outcome = cmd_benchmark(&cfg)?;
            print!("{}", outcome.table);
            if outcome.failed > 0 {
                return Err(CliError::Benchmark {
                    failed: outcome.failed,
                    total: outcome.cells.len(),
                });
            }
            Ok(())
        }
        Command::Gradcheck { inject_fault } => {
            let fault = match inject_fault.as_deref() {
                None => Fault::None,
                Some("tanh") => Fault::TanhDerivative,
                Some(other) => {
                    return Err(CliError::Config(format!(
                        "unknown fault {other:?}; the only known fault is \"tanh\""
                    )))
                }
            };
            let (report, status) = cmd_gradcheck(fault);
            print!("{}", report.render());
            status
        }
    }
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
