//! `fcil`: federated class-incremental learning experiments from the
//! command line. Subcommands: `run` (per-seed experiments for one method),
//! `ablation` (the cumulative component ladder), and `plot` (re-emit the
//! SVG plots for an existing run directory). FCIL_THREADS caps worker
//! parallelism; seeds run sequentially unless --parallel-seeds is given.

use clap::{Parser, Subcommand};
use fcil_cli::ablation::{render_table, run_ablation};
use fcil_cli::config::ExperimentConfig;
use fcil_cli::driver::{emit_plots_from_dir, run_experiment};
use fcil_core::client::Method;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "fcil", about = "Federated class-incremental learning simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the configured experiment for one method across its seeds.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's method (ecoral|replay|lwf|ewc).
        #[arg(long)]
        method: Option<String>,
        /// Override the config's seed list with a single seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run independent seeds concurrently.
        #[arg(long)]
        parallel_seeds: bool,
    },
    /// Run the cumulative component ladder plus the replay baseline.
    Ablation {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        parallel_seeds: bool,
    },
    /// Regenerate plots for an existing run directory.
    Plot {
        #[arg(long)]
        run: PathBuf,
    },
}

fn main() -> ExitCode {
    if let Ok(raw) = std::env::var("FCIL_THREADS") {
        match raw.parse::<usize>() {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("FCIL_THREADS must be a positive integer, got {raw:?}");
                return ExitCode::FAILURE;
            }
        }
    }
    match real_main() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn real_main() -> fcil_core::Result<ExitCode> {
    match Cli::parse().cmd {
        Cmd::Run {
            config,
            method,
            seed,
            out,
            parallel_seeds,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let method = method.as_deref().map(Method::parse).transpose()?;
            let summary = run_experiment(&cfg, method, seed, out, parallel_seeds)?;
            for r in &summary.records {
                println!(
                    "{} seed {}: A_avg {:.4}  A_last {:.4}  ({})",
                    r.method, r.seed, r.a_avg, r.a_last, r.dir
                );
            }
            for f in &summary.failures {
                eprintln!("seed {} failed: {}", f.seed, f.error);
            }
            println!(
                "{}: mean A_avg {:.4}, mean A_last {:.4} over {} seed(s)",
                summary.method,
                summary.mean_a_avg,
                summary.mean_a_last,
                summary.records.len()
            );
            Ok(if summary.ok() {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
        Cmd::Ablation {
            config,
            out,
            parallel_seeds,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let root = out.unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
            let rows = run_ablation(&cfg, &root, parallel_seeds)?;
            print!("{}", render_table(&rows));
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Plot { run } => {
            emit_plots_from_dir(&run)?;
            println!("plots written to {}", run.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}
