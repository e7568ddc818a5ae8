use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedctl_cli::commands::{self, ConfigArgs};
use fedctl_cli::CliError;

#[derive(Parser)]
#[command(
    name = "fedctl",
    version,
    about = "Personalized federated learning simulator with learning-rate feedback control"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigFlags {
    /// JSON config file (a previous run's manifest.json also works).
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one config value, e.g. --set control.gamma=5.0
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one simulation and write rounds.csv, clients.csv, summary.json, manifest.json.
    Run {
        #[command(flatten)]
        cfg: ConfigFlags,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long, value_name = "U64")]
        seed: Option<u64>,
    },
    /// Run control off/on x personalization off/on across seeds.
    Compare {
        #[command(flatten)]
        cfg: ConfigFlags,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Comma-separated seeds.
        #[arg(long, value_name = "LIST", default_value = "0,1,2,3,4")]
        seeds: String,
    },
    /// Write the generated dataset as a flat text file.
    DumpData {
        #[command(flatten)]
        cfg: ConfigFlags,
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        #[arg(long, value_name = "U64")]
        seed: Option<u64>,
    },
    /// Summarize a run directory or a dataset dump.
    Inspect {
        #[arg(value_name = "PATH", required_unless_present = "out")]
        path: Option<PathBuf>,
        #[arg(long, value_name = "DIR", conflicts_with = "path")]
        out: Option<PathBuf>,
    },
}

fn config_args(flags: ConfigFlags, seed: Option<u64>) -> ConfigArgs {
    ConfigArgs {
        config: flags.config,
        overrides: flags.overrides,
        seed,
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run { cfg, out, seed } => {
            let summary = commands::cmd_run(&config_args(cfg, seed), &out)?;
            println!(
                "final_global_accuracy={} final_global_loss={} -> {}",
                summary.final_global_accuracy,
                summary.final_global_loss,
                out.display()
            );
        }
        Command::Compare { cfg, out, seeds } => {
            let seeds = commands::parse_seeds(&seeds)?;
            let report = commands::cmd_compare(&config_args(cfg, None), &seeds, &out)?;
            for arm in &report.arms {
                println!(
                    "{}: accuracy={:.4} loss={:.4} personalization_gain={:.4}",
                    arm.label(),
                    arm.mean_final_accuracy,
                    arm.mean_final_loss,
                    arm.mean_personalization_gain
                );
            }
        }
        Command::DumpData { cfg, out, seed } => {
            commands::cmd_dump_data(&config_args(cfg, seed), &out)?;
            println!("wrote {}", out.display());
        }
        Command::Inspect { path, out } => {
            let path = path.or(out).expect("clap enforces one of path/--out");
            print!("{}", commands::cmd_inspect(&path)?.render());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fedctl: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
