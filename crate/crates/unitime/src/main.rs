//! The `unitime` command line: train, evaluate, zeroshot, synth, export-repr.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use unitime::cli;
use unitime::data::SplitPart;
use unitime::error::Error;

#[derive(Parser)]
#[command(name = "unitime", version, about = "Cross-domain time series forecasting")]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a run config and write checkpoint + logs.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Master seed; falls back to the config, then UNITIME_SEED, then 0.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated: no_instructions, no_masking, no_light_trans,
        /// no_reconstruction, ts_first.
        #[arg(long)]
        ablation: Option<String>,
        /// full | freeze | fpt
        #[arg(long)]
        tunability: Option<String>,
    },
    /// Report per-horizon MSE/MAE (with the repeat baseline) on test data.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Restrict to one domain by name.
        #[arg(long)]
        domain: Option<String>,
        /// Comma-separated prefix horizons, e.g. 12,24.
        #[arg(long, value_delimiter = ',')]
        horizons: Vec<usize>,
    },
    /// Select an instruction for unseen data, then report metrics on the
    /// non-probe test windows.
    Zeroshot {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// "all" or comma-separated training-domain names.
        #[arg(long, default_value = "all")]
        candidates: String,
        #[arg(long)]
        lookback: Option<usize>,
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long)]
        stride: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Generate synthetic domain CSVs.
    Synth {
        /// Built-in suite name (only "default").
        #[arg(long)]
        suite: Option<String>,
        /// Generator spec file (TOML) as an alternative to --suite.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Export mean-pooled backbone representations and the separation score.
    ExportRepr {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        samples: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn run(args: Args) -> unitime::Result<()> {
    match args.command {
        Command::Train {
            config,
            seed,
            out,
            ablation,
            tunability,
        } => {
            let outputs = cli::cmd_train(&cli::TrainArgs {
                config,
                seed,
                out,
                ablation,
                tunability,
            })?;
            println!(
                "trained: selected epoch {} -> {}",
                outputs.selected_epoch,
                outputs.checkpoint_path.display()
            );
            Ok(())
        }
        Command::Evaluate {
            checkpoint,
            domain,
            horizons,
        } => {
            let reports = cli::cmd_evaluate(&cli::EvaluateArgs {
                checkpoint,
                domain,
                horizons,
                split: SplitPart::Test,
            })?;
            for report in &reports {
                cli::print_report(report);
            }
            Ok(())
        }
        Command::Zeroshot {
            checkpoint,
            data,
            candidates,
            lookback,
            horizon,
            stride,
            seed,
        } => {
            let outcome = cli::cmd_zeroshot(&cli::ZeroShotArgs {
                checkpoint,
                data,
                candidates,
                lookback,
                horizon,
                stride,
                seed,
            })?;
            println!(
                "{}",
                serde_json::to_string(&outcome.choice).expect("choice serializes")
            );
            cli::print_report(&outcome.report);
            Ok(())
        }
        Command::Synth {
            suite,
            spec,
            out,
            seed,
        } => {
            let written = cli::cmd_synth(&cli::SynthArgs {
                suite,
                spec,
                out,
                seed,
            })?;
            for path in written {
                println!("wrote {}", path.display());
            }
            Ok(())
        }
        Command::ExportRepr {
            checkpoint,
            out,
            samples,
            seed,
        } => {
            let score = cli::cmd_export_repr(&cli::ExportReprArgs {
                checkpoint,
                out,
                samples,
                seed,
            })?;
            println!("separation_score {score:.6}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                Error::Config(_) | Error::ConfigParse(_) => ExitCode::from(2),
                Error::Diverged { .. } => ExitCode::from(3),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
