//! Stage orchestration over one experiment config: train victims, build
//! defenders, evaluate the condition matrix, and render reports. The CLI is a
//! thin wrapper over these functions.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agent::{
    evaluate_policy, load_policy, save_policy, train_agent,
};
use crate::backdoor::Poisoner;
use crate::config::ExperimentConfig;
use crate::defender::{
    calibrate_threshold, collect_rollouts, holdout_losses, load_defender, make_detector,
    save_dataset, save_defender, train_with_objective, DualObjective, SingleObjective,
};
use crate::error::{Error, Result};
use crate::harness::report::{build_summary, write_csv, write_summary, Summary};
use crate::harness::{evaluate_matrix, AttackSchedule, EvalArtifacts, MatrixCell, ProtectionCondition};

/// Fixed artifact layout inside the experiment's output directory.
pub struct ArtifactPaths {
    pub out_dir: PathBuf,
}

impl ArtifactPaths {
    pub fn new(out_dir: &Path) -> Self {
        ArtifactPaths {
            out_dir: out_dir.to_path_buf(),
        }
    }

    pub fn clean_policy(&self) -> PathBuf {
        self.out_dir.join("clean_policy.ckpt")
    }

    pub fn clean_policy_mid(&self) -> PathBuf {
        self.out_dir.join("clean_policy_mid.ckpt")
    }

    pub fn poisoned_policy(&self) -> PathBuf {
        self.out_dir.join("poisoned_policy.ckpt")
    }

    pub fn poisoned_policy_mid(&self) -> PathBuf {
        self.out_dir.join("poisoned_policy_mid.ckpt")
    }

    pub fn audit(&self) -> PathBuf {
        self.out_dir.join("audit.json")
    }

    pub fn dataset(&self) -> PathBuf {
        self.out_dir.join("rollouts.dat")
    }

    pub fn defender_single(&self) -> PathBuf {
        self.out_dir.join("defender_single.ckpt")
    }

    pub fn defender_dual(&self) -> PathBuf {
        self.out_dir.join("defender_dual.ckpt")
    }

    pub fn eval_csv(&self) -> PathBuf {
        self.out_dir.join("eval.csv")
    }

    pub fn summary(&self) -> PathBuf {
        self.out_dir.join("summary.json")
    }
}

fn refuse_overwrite(paths: &[PathBuf], force: bool) -> Result<()> {
    if force {
        return Ok(());
    }
    for p in paths {
        if p.exists() {
            return Err(Error::config(format!(
                "output {} already exists; pass --force to overwrite",
                p.display()
            )));
        }
    }
    Ok(())
}

fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AuditLog {
    pub config_hash: String,
    pub tool_version: String,
    pub total_steps: usize,
    pub poison_count: usize,
    pub proportion: f64,
    pub injection_start_step: u64,
    pub poisoned_indices: Vec<u64>,
}

#[derive(Debug)]
pub struct TrainReport {
    pub config_hash: String,
    pub poison_count: usize,
    pub clean_mean_return: f64,
    pub poisoned_clean_mean_return: f64,
}

/// Train the clean and poisoned victims from the same master seed, so the two
/// runs share initialization, env seeds, and exploration noise; the poisoned
/// run differs only through the corrupted records.
pub fn cmd_train(cfg: &ExperimentConfig, force: bool) -> Result<TrainReport> {
    let hash = cfg.hash();
    let paths = ArtifactPaths::new(&cfg.experiment.out_dir);
    std::fs::create_dir_all(&paths.out_dir)?;
    refuse_overwrite(
        &[
            paths.clean_policy(),
            paths.clean_policy_mid(),
            paths.poisoned_policy(),
            paths.poisoned_policy_mid(),
            paths.audit(),
        ],
        force,
    )?;
    let master = cfg.experiment.master_seed;

    let mut env = cfg.make_env()?;
    let clean = train_agent(env.as_mut(), &cfg.agent, None, master)?;
    save_policy(&clean.policy, &paths.clean_policy(), &hash)?;
    save_policy(&clean.mid_policy, &paths.clean_policy_mid(), &hash)?;

    let state_dim = env.spec().state_dim;
    let trigger = cfg.trigger.build(state_dim)?;
    let poisoner = Poisoner::plan(
        trigger,
        cfg.poison.clone(),
        cfg.agent.total_steps as u64,
        master,
    )?;
    let audit = AuditLog {
        config_hash: hash.clone(),
        tool_version: crate::VERSION.to_string(),
        total_steps: cfg.agent.total_steps,
        poison_count: poisoner.poison_count(),
        proportion: cfg.poison.proportion,
        injection_start_step: cfg.poison.injection_start_step,
        poisoned_indices: poisoner.planned_indices(),
    };

    let mut env = cfg.make_env()?;
    let poisoned = train_agent(env.as_mut(), &cfg.agent, Some(&poisoner), master)?;
    save_policy(&poisoned.policy, &paths.poisoned_policy(), &hash)?;
    save_policy(&poisoned.mid_policy, &paths.poisoned_policy_mid(), &hash)?;

    let mut text = serde_json::to_string_pretty(&audit).expect("audit serializes");
    text.push('\n');
    std::fs::write(paths.audit(), text)?;

    let seeds = cfg.eval_seeds();
    let clean_evals = evaluate_policy(&clean.policy, env.as_mut(), &seeds)?;
    let poisoned_evals = evaluate_policy(&poisoned.policy, env.as_mut(), &seeds)?;
    let mean = |evals: &[crate::agent::EvalEpisode]| {
        evals.iter().map(|e| e.episode_return as f64).sum::<f64>() / evals.len().max(1) as f64
    };

    Ok(TrainReport {
        config_hash: hash,
        poison_count: audit.poison_count,
        clean_mean_return: mean(&clean_evals),
        poisoned_clean_mean_return: mean(&poisoned_evals),
    })
}

#[derive(Debug)]
pub struct DefendReport {
    pub config_hash: String,
    pub dataset_hash: String,
    pub dataset_size: usize,
    pub h_single: f32,
    pub h_dual: f32,
    /// (state loss, action loss) on the shared holdout.
    pub single_losses: (f32, f32),
    pub dual_losses: (f32, f32),
}

/// Collect clean rollouts with the poisoned victim, train the single- and
/// dual-objective defenders on identical data, and calibrate their thresholds.
pub fn cmd_defend(cfg: &ExperimentConfig, force: bool) -> Result<DefendReport> {
    let hash = cfg.hash();
    let paths = ArtifactPaths::new(&cfg.experiment.out_dir);
    std::fs::create_dir_all(&paths.out_dir)?;
    refuse_overwrite(
        &[
            paths.dataset(),
            paths.defender_single(),
            paths.defender_dual(),
        ],
        force,
    )?;
    let master = cfg.experiment.master_seed;

    let policy = load_policy(&paths.poisoned_policy())?;
    let mut env = cfg.make_env()?;
    let noise_std = cfg
        .defender
        .resolved_noise_std(&env.spec().action_range());
    let dataset = collect_rollouts(
        &policy,
        env.as_mut(),
        cfg.defender.dataset_size,
        cfg.defender.noise_prob,
        noise_std,
        master,
    )?;
    save_dataset(&dataset, &paths.dataset(), &hash)?;
    let dataset_hash = file_sha256(&paths.dataset())?;

    let train_cfg = cfg.defender.train_config();
    let single = train_with_objective(&dataset, &SingleObjective, &train_cfg, master)?;
    let dual_objective = DualObjective {
        policy: policy.clone(),
        lambda: cfg.defender.lambda,
    };
    let dual = train_with_objective(&dataset, &dual_objective, &train_cfg, master)?;
    debug_assert_eq!(single.holdout, dual.holdout);

    let metric = make_detector(&cfg.defender.detector, &policy)?;
    let holdout_refs: Vec<&crate::defender::RolloutTuple> =
        single.holdout.iter().map(|&i| &dataset.tuples[i]).collect();
    let h_single = calibrate_threshold(
        &single.model,
        &holdout_refs,
        cfg.defender.calibration_quantile,
        metric.as_ref(),
    )?;
    let h_dual = calibrate_threshold(
        &dual.model,
        &holdout_refs,
        cfg.defender.calibration_quantile,
        metric.as_ref(),
    )?;

    save_defender(&single.model, h_single, &paths.defender_single(), &hash)?;
    save_defender(&dual.model, h_dual, &paths.defender_dual(), &hash)?;

    let single_losses = holdout_losses(&single.model, &dataset, &single.holdout, &policy)?;
    let dual_losses = holdout_losses(&dual.model, &dataset, &dual.holdout, &policy)?;

    Ok(DefendReport {
        config_hash: hash,
        dataset_hash,
        dataset_size: dataset.len(),
        h_single,
        h_dual,
        single_losses,
        dual_losses,
    })
}

/// Run the four-condition evaluation matrix over every configured schedule and
/// write the CSV and JSON reports.
pub fn cmd_eval(cfg: &ExperimentConfig, force: bool, check: bool) -> Result<Summary> {
    let hash = cfg.hash();
    let paths = ArtifactPaths::new(&cfg.experiment.out_dir);
    std::fs::create_dir_all(&paths.out_dir)?;
    refuse_overwrite(&[paths.eval_csv(), paths.summary()], force)?;

    let policy = load_policy(&paths.poisoned_policy())?;
    let (single_model, h_single) = load_defender(&paths.defender_single())?;
    let (dual_model, h_dual) = load_defender(&paths.defender_dual())?;
    let env = cfg.make_env()?;
    let trigger = cfg.trigger.build(env.spec().state_dim)?;
    let metric = make_detector(&cfg.defender.detector, &policy)?;

    let mut cells = vec![MatrixCell {
        condition: ProtectionCondition::UnprotectedClean,
        schedule: AttackSchedule::disabled(),
    }];
    if cfg.eval.include_defended_clean {
        for condition in [
            ProtectionCondition::SingleObjectiveDefended,
            ProtectionCondition::DualObjectiveDefended,
        ] {
            cells.push(MatrixCell {
                condition,
                schedule: AttackSchedule::disabled(),
            });
        }
    }
    for schedule in cfg.eval.schedules.iter().filter(|s| s.enabled) {
        for condition in [
            ProtectionCondition::UnprotectedAttacked,
            ProtectionCondition::SingleObjectiveDefended,
            ProtectionCondition::DualObjectiveDefended,
        ] {
            cells.push(MatrixCell {
                condition,
                schedule: *schedule,
            });
        }
    }

    let artifacts = EvalArtifacts {
        policy: &policy,
        env: env.as_ref(),
        trigger: &trigger,
        single: (&single_model, h_single),
        dual: (&dual_model, h_dual),
        metric: metric.as_ref(),
    };
    let seeds = cfg.eval_seeds();
    let records = evaluate_matrix(&artifacts, &cells, &seeds)?;
    write_csv(&records, &paths.eval_csv(), &hash)?;

    let mut summary = build_summary(&records, &seeds, &hash);
    if paths.clean_policy().exists() {
        let clean_policy = load_policy(&paths.clean_policy())?;
        let mut env = cfg.make_env()?;
        let evals = evaluate_policy(&clean_policy, env.as_mut(), &seeds)?;
        summary.clean_policy_mean_return = Some(
            evals.iter().map(|e| e.episode_return as f64).sum::<f64>() / evals.len() as f64,
        );
    }
    write_summary(&summary, &paths.summary())?;

    if check {
        let bad: Vec<&str> = summary
            .orderings
            .iter()
            .filter(|o| !o.headline_ok)
            .map(|o| o.schedule.as_str())
            .collect();
        if !bad.is_empty() {
            return Err(Error::CheckFailed(format!(
                "headline return ordering violated under schedule(s) {bad:?}"
            )));
        }
    }
    Ok(summary)
}

/// Render the stored JSON summary as a text table.
pub fn cmd_report(cfg: &ExperimentConfig) -> Result<String> {
    let paths = ArtifactPaths::new(&cfg.experiment.out_dir);
    let text = std::fs::read_to_string(paths.summary()).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingArtifact {
                what: "evaluation summary (run `eval` first)".to_string(),
                path: paths.summary(),
            }
        } else {
            Error::Io(e)
        }
    })?;
    let summary: Summary = serde_json::from_str(&text)
        .map_err(|e| Error::config(format!("unreadable summary.json: {e}")))?;

    let mut out = String::new();
    out.push_str(&format!(
        "experiment summary (tool {}, config {})\n",
        summary.tool_version,
        &summary.config_hash[..12.min(summary.config_hash.len())]
    ));
    if let Some(base) = summary.clean_policy_mean_return {
        out.push_str(&format!("clean-policy baseline return: {base:.2}\n"));
    }
    out.push_str(&format!(
        "{:<28} {:>8} {:>12} {:>8} {:>8} {:>8} {:>8}\n",
        "condition", "schedule", "return", "length", "recall", "prec", "fpr"
    ));
    for c in &summary.cells {
        let (recall, prec, fpr) = match &c.detection {
            Some(d) => (
                d.recall.map(|v| format!("{v:.3}")).unwrap_or("-".into()),
                d.precision.map(|v| format!("{v:.3}")).unwrap_or("-".into()),
                format!("{:.4}", d.false_positive_rate),
            ),
            None => ("-".into(), "-".into(), "-".into()),
        };
        out.push_str(&format!(
            "{:<28} {:>8} {:>6.2}±{:<5.2} {:>8.1} {:>8} {:>8} {:>8}\n",
            c.condition, c.schedule, c.mean_return, c.std_return, c.mean_length, recall, prec, fpr
        ));
    }
    for o in &summary.orderings {
        out.push_str(&format!(
            "[{}] clean {:.2} | dual {:.2} | single {:.2} | attacked {:.2} -> headline {}\n",
            o.schedule,
            o.clean_mean,
            o.dual_mean,
            o.single_mean,
            o.attacked_mean,
            if o.headline_ok { "OK" } else { "VIOLATED" }
        ));
    }
    Ok(out)
}
