//! `rts` drives the full pipeline from one config file:
//!
//! ```text
//! rts train  --config exp.toml        # clean + poisoned victim checkpoints
//! rts defend --config exp.toml        # rollouts, both defenders, threshold H
//! rts eval   --config exp.toml        # condition matrix -> eval.csv + summary.json
//! rts report --config exp.toml        # pretty-print the summary
//! ```
//!
//! Exit codes: 0 success, 2 config error, 3 missing artifact, 4 failed
//! `--check` ordering, 1 anything else.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rts_core::config::ExperimentConfig;
use rts_core::error::Error;
use rts_core::pipeline;

#[derive(Parser)]
#[command(name = "rts", version, about = "Backdoor-defense laboratory for continuous control")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the master seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory from the config.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the clean and poisoned victim policies.
    Train {
        #[command(flatten)]
        common: Common,
        /// Overwrite existing outputs.
        #[arg(long)]
        force: bool,
    },
    /// Collect rollouts and train both defenders with calibrated thresholds.
    Defend {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        force: bool,
    },
    /// Evaluate the protection-condition matrix and write reports.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        force: bool,
        /// Exit with code 4 if the headline return ordering is violated.
        #[arg(long)]
        check: bool,
    },
    /// Pretty-print the stored evaluation summary.
    Report {
        #[command(flatten)]
        common: Common,
    },
}

fn load(common: &Common) -> Result<ExperimentConfig, Error> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.experiment.master_seed = seed;
    }
    if let Some(dir) = &common.out_dir {
        cfg.experiment.out_dir = dir.clone();
    }
    for warning in cfg.validate()? {
        eprintln!("warning: {warning}");
    }
    Ok(cfg)
}

fn run() -> Result<(), Error> {
    match Cli::parse().command {
        Command::Train { common, force } => {
            let cfg = load(&common)?;
            let report = pipeline::cmd_train(&cfg, force)?;
            println!(
                "trained victims (config {}): {} poisoned records, clean return {:.2}, poisoned-policy clean return {:.2}",
                &report.config_hash[..12],
                report.poison_count,
                report.clean_mean_return,
                report.poisoned_clean_mean_return,
            );
        }
        Command::Defend { common, force } => {
            let cfg = load(&common)?;
            let report = pipeline::cmd_defend(&cfg, force)?;
            println!(
                "trained defenders on {} tuples (dataset {}):",
                report.dataset_size,
                &report.dataset_hash[..12],
            );
            println!(
                "  single: H={:.5} state_loss={:.5} action_loss={:.5}",
                report.h_single, report.single_losses.0, report.single_losses.1
            );
            println!(
                "  dual:   H={:.5} state_loss={:.5} action_loss={:.5}",
                report.h_dual, report.dual_losses.0, report.dual_losses.1
            );
        }
        Command::Eval {
            common,
            force,
            check,
        } => {
            let cfg = load(&common)?;
            let summary = pipeline::cmd_eval(&cfg, force, check)?;
            for o in &summary.orderings {
                println!(
                    "[{}] clean {:.2} | dual {:.2} | single {:.2} | attacked {:.2} ({})",
                    o.schedule,
                    o.clean_mean,
                    o.dual_mean,
                    o.single_mean,
                    o.attacked_mean,
                    if o.headline_ok { "ok" } else { "ordering violated" }
                );
            }
            println!(
                "wrote {} and {}",
                pipeline::ArtifactPaths::new(&cfg.experiment.out_dir)
                    .eval_csv()
                    .display(),
                pipeline::ArtifactPaths::new(&cfg.experiment.out_dir)
                    .summary()
                    .display()
            );
        }
        Command::Report { common } => {
            let cfg = load(&common)?;
            print!("{}", pipeline::cmd_report(&cfg)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            let code = match err {
                Error::Config(_) | Error::Dimension { .. } => 2,
                Error::MissingArtifact { .. } => 3,
                Error::CheckFailed(_) => 4,
                _ => 1,
            };
            ExitCode::from(code)
        }
    }
}
