use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use schwarz_core::experiments::{run_experiment, Experiment};
use schwarz_core::registry::PROBLEMS;
use toml::Table;

mod config;
mod output;

#[derive(Parser)]
#[command(name = "schwarz-ct", version, about = "Overlapping Schwarz experiments for LQ optimal control")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write CSVs, report.txt and plot.gp
    Run {
        /// TOML configuration; without it the experiment's defaults are used
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        experiment: Option<String>,
        /// Output directory (default: output_dir from the config, else ./out)
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads for the subdomain solves
        #[arg(long)]
        threads: Option<usize>,
        /// Per-key overrides, e.g. `--partition.m 3 --gd.eta 0.005`
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--SECTION.KEY VALUE")]
        overrides: Vec<String>,
    },
    /// List registry problems
    ListProblems,
    /// List experiments
    ListExperiments,
}

const EXIT_CHECK_FAILED: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

struct Failure {
    code: u8,
    err: anyhow::Error,
}

fn usage(err: anyhow::Error) -> Failure {
    Failure { code: EXIT_USAGE, err }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::ListProblems => {
            for (name, desc) in PROBLEMS {
                println!("{:<24} {}", name, desc);
            }
            ExitCode::SUCCESS
        }
        Command::ListExperiments => {
            for e in Experiment::ALL {
                println!("{:<20} {}", e.name(), e.description());
            }
            ExitCode::SUCCESS
        }
        Command::Run { config, experiment, out, seed, threads, overrides } => {
            match run(config, experiment, out, seed, threads, &overrides) {
                Ok(true) => ExitCode::SUCCESS,
                Ok(false) => ExitCode::from(EXIT_CHECK_FAILED),
                Err(f) => {
                    eprintln!("error: {:#}", f.err);
                    ExitCode::from(f.code)
                }
            }
        }
    }
}

fn run(
    config: Option<PathBuf>,
    experiment: Option<String>,
    out: Option<PathBuf>,
    seed: Option<u64>,
    threads: Option<usize>,
    overrides: &[String],
) -> Result<bool, Failure> {
    let mut table = match &config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display())).map_err(usage)?;
            text.parse::<Table>().with_context(|| format!("cannot parse {}", path.display())).map_err(usage)?
        }
        None => Table::new(),
    };
    let overrides = config::parse_override_args(overrides).map_err(usage)?;
    config::apply_overrides(&mut table, &overrides).map_err(usage)?;
    let resolved = config::resolve(&table, experiment.as_deref()).map_err(usage)?;
    let mut cfg = resolved.config;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(|e| usage(e.into()))?;
    if let Some(n) = threads {
        if n == 0 {
            return Err(usage(anyhow::anyhow!("--threads must be positive")));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| usage(e.into()))?;
    }
    let dir = out.or(resolved.output_dir).unwrap_or_else(|| PathBuf::from("out"));

    let result = run_experiment(&cfg).map_err(|e| Failure { code: EXIT_NUMERICAL, err: e.into() })?;
    output::write_all(&dir, &cfg, &result).map_err(usage)?;
    print!("{}", output::report_text(&cfg, &result));
    Ok(result.all_pass())
}
