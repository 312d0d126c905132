use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dcan::commands::{self, SweepAxis};
use dcan::{CliError, RunConfig};

/// Conditional-distribution domain adaptation on small datasets.
///
/// Log verbosity follows the DCAN_LOG environment variable (for example
/// `DCAN_LOG=info`).
#[derive(Debug, Parser)]
#[command(name = "dcan", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Pre-train on the source, adapt to the target and write all artifacts.
    Train {
        /// JSON configuration; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the configured seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compare analytic gradients against central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 50, value_parser = clap::value_parser!(u64).range(1..))]
        trials: u64,
    },
    /// Write feature embeddings of a saved model for both domains.
    DumpEmbeddings {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train once per value of one configuration field.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        axis: SweepAxis,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

/// Loads the configuration and the directory its relative paths resolve
/// against.
fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<(RunConfig, PathBuf), CliError> {
    let (mut cfg, base) = match path {
        Some(p) => (
            RunConfig::load(p)?,
            p.parent().map(Path::to_path_buf).unwrap_or_default(),
        ),
        None => (RunConfig::default(), PathBuf::from(".")),
    };
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    Ok((cfg, base))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { config, out, seed } => {
            let (cfg, base) = load_config(config.as_deref(), seed)?;
            let summary = commands::train(&cfg, &base, &out)?;
            println!(
                "target accuracy {:.4} ({} steps), artifacts in {}",
                summary.accuracy,
                summary.steps_run,
                out.display()
            );
        }
        Command::Gradcheck { seed, trials } => {
            let results = commands::gradcheck(seed, trials)?;
            for r in &results {
                println!(
                    "{:<20} max rel error {:.3e} (tolerance {:.0e}) {}",
                    r.suite,
                    r.max_rel_error,
                    r.tolerance,
                    if r.passed { "ok" } else { "FAILED" }
                );
            }
            let failed: Vec<_> = results.iter().filter(|r| !r.passed).collect();
            if !failed.is_empty() {
                let detail = serde_json::to_string_pretty(&failed).unwrap_or_default();
                return Err(CliError::Runtime(format!(
                    "gradient check failed:\n{detail}"
                )));
            }
        }
        Command::DumpEmbeddings {
            config,
            checkpoint,
            out,
            seed,
        } => {
            let (cfg, base) = load_config(config.as_deref(), seed)?;
            let path = commands::dump_embeddings(&cfg, &base, &checkpoint, &out)?;
            println!("wrote {}", path.display());
        }
        Command::Sweep {
            config,
            axis,
            values,
            out,
            seed,
        } => {
            let (cfg, base) = load_config(config.as_deref(), seed)?;
            let rows = commands::sweep(&cfg, &base, axis, &values, &out)?;
            for row in &rows {
                match (row.accuracy, &row.error) {
                    (Some(acc), _) => {
                        println!("{} = {}: accuracy {acc:.4}", axis.name(), row.value)
                    }
                    (None, Some(e)) => println!("{} = {}: failed: {e}", axis.name(), row.value),
                    (None, None) => {}
                }
            }
            let failed = rows.iter().filter(|r| r.error.is_some()).count();
            if failed > 0 {
                return Err(CliError::Runtime(format!(
                    "{failed} of {} sweep runs failed",
                    rows.len()
                )));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DCAN_LOG", "warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
