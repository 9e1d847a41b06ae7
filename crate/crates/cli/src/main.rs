use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use robustlab_cli::runner::{default_out_root, OUT_ENV};
use robustlab_cli::{compare, run, ExperimentConfig, RunOptions};

#[derive(Parser)]
#[command(name = "robustlab", version, about = "Desk-scale adversarial training experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate every run of a config.
    Run {
        config: PathBuf,
        /// Re-run runs that already completed.
        #[arg(long)]
        force: bool,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Comma-separated seeds replacing the config's list.
        #[arg(long, value_delimiter = ',')]
        seed_override: Option<Vec<u64>>,
        /// Output root; defaults to $ROBUSTLAB_OUT or ./results.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize two groups (label or strategy) of a results.csv.
    Compare {
        results: PathBuf,
        baseline: String,
        candidate: String,
        #[arg(long)]
        json: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            config,
            force,
            workers,
            seed_override,
            out,
        } => {
            let cfg = match ExperimentConfig::load(&config) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("{e}");
                    return ExitCode::from(2);
                }
            };
            let opts = RunOptions {
                force,
                workers,
                seed_override,
                out_root: out.unwrap_or_else(default_out_root),
            };
            match run(&cfg, &opts) {
                Ok(s) => {
                    println!(
                        "{}: {} trained, {} reused, {} failed -> {}",
                        cfg.name,
                        s.trained,
                        s.skipped,
                        s.failures.len(),
                        s.out_dir.join("results.csv").display()
                    );
                    for (id, e) in &s.failures {
                        eprintln!("run {id} failed: {e}");
                    }
                    if s.failures.is_empty() {
                        ExitCode::SUCCESS
                    } else {
                        ExitCode::FAILURE
                    }
                }
                Err(e) => {
                    eprintln!("{e} (output root from --out or {OUT_ENV})");
                    ExitCode::FAILURE
                }
            }
        }
        Command::Compare {
            results,
            baseline,
            candidate,
            json,
        } => match compare::compare(&results, &baseline, &candidate) {
            Ok(c) if json => {
                println!("{}", serde_json::to_string_pretty(&c).expect("serializable"));
                ExitCode::SUCCESS
            }
            Ok(c) => {
                println!("{c}");
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("{e}");
                ExitCode::FAILURE
            }
        },
    }
}
