use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use t1t2_core::trainer::TrainMode;
use t1t2_lab::config::{load_config, Mode};
use t1t2_lab::error::{LabError, Result};
use t1t2_lab::runner;

/// Train MLPs while tuning their noise and L2 hyperparameters on a
/// validation set. Outputs go to the config's output_dir, or $T1T2_OUT.
#[derive(Parser)]
#[command(name = "t1t2", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum TrainArg {
    T1t2,
    Fixed,
}

#[derive(Subcommand)]
enum Command {
    /// One training run: trajectory.csv and summary.json.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's mode.
        #[arg(long, value_enum)]
        mode: Option<TrainArg>,
    },
    /// Fixed-hyperparameter grid: grid.csv and grid_meta.json.
    Grid {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Tuned run followed by a fixed rerun at the found values, per seed.
    Paired {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
    },
    /// Analytic hypergradient against finite differences.
    Hypercheck {
        #[arg(long)]
        config: PathBuf,
        /// Flip the analytic sign; the check must then fail.
        #[arg(long, hide = true)]
        corrupt_sign: bool,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, mode } => {
            let cfg = load_config(&config)?;
            let mode = match (mode, cfg.mode) {
                (Some(TrainArg::T1t2), _) | (None, Mode::T1T2) => TrainMode::T1T2,
                (Some(TrainArg::Fixed), _) | (None, Mode::Fixed) => TrainMode::Fixed,
                (None, _) => {
                    return Err(LabError::Usage(
                        "config mode is not t1t2 or fixed; pass --mode".into(),
                    ))
                }
            };
            let out = runner::output_dir(&cfg);
            let run = runner::run_train(&cfg, mode, &out)?;
            let s = &run.outcome.summary;
            println!(
                "{} steps, {} hyper-updates, val error {:.4}, test error {:.4} -> {}",
                s.steps,
                s.hyper_update_count,
                s.final_eval.t2.error,
                s.final_eval.test.error,
                out.display()
            );
        }
        Command::Grid { spec, workers } => {
            if workers == 0 {
                return Err(LabError::Usage("--workers must be at least 1".into()));
            }
            let cfg = load_config(&spec)?;
            let out = runner::output_dir(&cfg);
            let run = runner::run_grid(&cfg, workers, &out)?;
            let failed = run.cells.iter().filter(|(_, r)| r.is_err()).count();
            println!("{} cells, {failed} failed -> {}", run.cells.len(), out.display());
        }
        Command::Paired { config, seeds } => {
            let cfg = load_config(&config)?;
            let out = runner::output_dir(&cfg);
            let runs = runner::run_paired(&cfg, seeds, runner::RERUN_INIT_OFFSET, &out)?;
            for r in &runs {
                println!(
                    "seed {}: test error {:.4} tuned, {:.4} rerun",
                    r.seed, r.t1t2.final_eval.test.error, r.rerun.final_eval.test.error
                );
            }
        }
        Command::Hypercheck { config, corrupt_sign } => {
            let cfg = load_config(&config)?;
            let out = runner::output_dir(&cfg);
            let result = runner::run_hypercheck(&cfg, corrupt_sign, &out);
            if let Ok(rows) = &result {
                for r in rows {
                    println!("{:<14} rel error {:.2e} (tol {:.0e}) ok", r.name, r.rel_error, r.tolerance);
                }
            }
            result?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
