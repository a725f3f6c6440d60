use std::path::PathBuf;
use std::process::ExitCode;

use bapo_cli::commands::DEFAULT_ALARM;
use bapo_cli::{
    cmd_compare, cmd_dump_universe, cmd_migration, cmd_train, cmd_verify_theory, output_dir,
    CliError, CompareArgs, MigrationArgs, Overrides, TrainArgs,
};
use bapo_core::Algorithm;
use clap::{Args, Parser, Subcommand};

/// Batch-adaptive policy optimization lab.
///
/// When --out is omitted, outputs go under $BAPO_OUT_DIR (default ./runs).
#[derive(Parser)]
#[command(name = "bapo", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunFlags {
    /// Comma-separated seed list.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Override total_steps.
    #[arg(long)]
    steps: Option<u64>,
    /// Override the tracked prompt count.
    #[arg(long)]
    track_subset: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one algorithm and write metrics, snapshots and a manifest.
    Train {
        /// TOML experiment config; built-in defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// grpo, dapo, bapo or bapo_mini.
        #[arg(long)]
        algorithm: Option<Algorithm>,
        #[command(flatten)]
        run: RunFlags,
    },
    /// Run two or more configs over a shared seed set and tabulate them.
    Compare {
        /// Repeat once per config.
        #[arg(long = "config", required = true)]
        configs: Vec<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        run: RunFlags,
    },
    /// Accuracy-bin migration matrices of a finished run relative to step 0.
    Migration {
        run_dir: PathBuf,
        /// Comma-separated evaluation steps; all recorded steps by default.
        #[arg(long, value_delimiter = ',')]
        steps: Vec<u64>,
        /// Defaults to the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_ALARM)]
        alarm: f64,
    },
    /// Numerical checks of the improvement bound and its constants.
    VerifyTheory {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the configured prompt universe as JSON.
    DumpUniverse {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn overrides(run: &RunFlags, algorithm: Option<Algorithm>) -> Overrides {
    Overrides {
        algorithm,
        steps: run.steps,
        track_subset: run.track_subset,
    }
}

fn stem(p: &Option<PathBuf>, fallback: &str) -> String {
    p.as_ref()
        .and_then(|p| p.file_stem())
        .map_or_else(|| fallback.to_string(), |s| s.to_string_lossy().into_owned())
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train {
            config,
            out,
            algorithm,
            run,
        } => {
            let out = output_dir(out.as_deref(), &format!("train-{}", stem(&config, "default")));
            let summaries = cmd_train(&TrainArgs {
                config,
                out: out.clone(),
                seeds: run.seeds.clone(),
                overrides: overrides(&run, algorithm),
            })?;
            for s in summaries {
                println!(
                    "{} seed {}: final reward {}, unlocked {}, training responses {}",
                    s.algorithm,
                    s.seed,
                    fmt_opt(s.final_exact_mean_reward),
                    fmt_opt(s.unlocked_fraction),
                    s.ledger.training_responses
                );
            }
            println!("wrote {}", out.display());
        }
        Command::Compare { configs, out, run } => {
            let out = output_dir(out.as_deref(), "compare");
            let summary = cmd_compare(&CompareArgs {
                configs,
                out: out.clone(),
                seeds: run.seeds.clone(),
                overrides: overrides(&run, None),
            })?;
            println!("{:<20} {:<14} {:>10} {:>10} {:>14}", "label", "algorithm", "unlocked", "std", "rollouts");
            for l in &summary.labels {
                println!(
                    "{:<20} {:<14} {:>10} {:>10} {:>14.1}",
                    l.label,
                    l.algorithm,
                    fmt_opt(l.unlocked_mean),
                    fmt_opt(l.unlocked_std),
                    l.mean_training_responses()
                );
            }
            println!("wrote {}", out.display());
        }
        Command::Migration {
            run_dir,
            steps,
            out,
            alarm,
        } => {
            let report = cmd_migration(&MigrationArgs {
                run_dir,
                steps,
                out,
                alarm,
            })?;
            for m in &report.matrices {
                println!(
                    "step {:>5}: regression {:.4} (exact {:.4}){} unlocked {}",
                    m.query_step,
                    m.regression_fraction,
                    m.exact_regression_fraction,
                    if m.alarm { " (above alarm)" } else { "" },
                    fmt_opt(m.unlocked_fraction)
                );
            }
        }
        Command::VerifyTheory { config, out } => {
            let out = output_dir(out.as_deref(), "theory");
            let r = cmd_verify_theory(config.as_deref(), &out)?;
            println!(
                "K = ({}, {}, {}); min margin {:.3e} over {} trials, {:.3e} adversarial",
                r.constants.k1, r.constants.k2, r.constants.k3, r.randomized.min_margin, r.randomized.trials,
                r.adversarial.min_margin
            );
            println!("all checks passed; wrote {}", out.join("theory.json").display());
        }
        Command::DumpUniverse { config, out } => {
            let out = output_dir(out.as_deref(), "universe");
            let u = cmd_dump_universe(config.as_deref(), &out)?;
            println!("{} prompts, vocab {}, length {}", u.len(), u.vocab_size, u.max_len);
            println!("wrote {}", out.join("universe.json").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
