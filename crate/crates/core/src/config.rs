//! One declarative config file drives every pipeline stage; subcommand flags
//! only override the seed and output directory. Unknown keys are rejected,
//! and a hash of the resolved config (excluding the output path) is stamped
//! into every artifact and report.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agent::AgentConfig;
use crate::backdoor::{AttackKind, PoisonConfig, Trigger, TriggerMode};
use crate::envs::{make_env, Env, Overrides};
use crate::error::{Error, Result};
use crate::harness::AttackSchedule;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub name: String,
    pub out_dir: PathBuf,
    pub master_seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSection {
    pub name: String,
    #[serde(default)]
    pub overrides: Overrides,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TriggerSection {
    pub mode: TriggerMode,
    pub dims: Vec<usize>,
    pub values: Vec<f32>,
}

impl TriggerSection {
    pub fn build(&self, state_dim: usize) -> Result<Trigger> {
        if self.dims.len() != self.values.len() {
            return Err(Error::config(format!(
                "trigger.dims has {} entries but trigger.values has {}",
                self.dims.len(),
                self.values.len()
            )));
        }
        let mut mask = vec![false; state_dim];
        let mut delta = vec![0.0f32; state_dim];
        for (d, v) in self.dims.iter().zip(&self.values) {
            if *d >= state_dim {
                return Err(Error::config(format!(
                    "trigger.dims contains {d}, but the env state has {state_dim} dims"
                )));
            }
            if mask[*d] {
                return Err(Error::config(format!("trigger.dims lists dim {d} twice")));
            }
            mask[*d] = true;
            delta[*d] = *v;
        }
        let trigger = Trigger {
            mask,
            delta,
            mode: self.mode,
        };
        trigger.validate(state_dim)?;
        Ok(trigger)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DefenderSection {
    pub dataset_size: usize,
    pub noise_prob: f64,
    /// Exploration noise std in action units; if unset, 0.1 x the largest
    /// per-dim action range.
    pub noise_std: Option<f32>,
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub lambda: f32,
    pub holdout_fraction: f64,
    pub calibration_quantile: f64,
    pub detector: String,
}

impl Default for DefenderSection {
    fn default() -> Self {
        DefenderSection {
            dataset_size: 50_000,
            noise_prob: 0.01,
            noise_std: None,
            hidden: vec![256, 256],
            epochs: 100,
            batch_size: 256,
            lr: 1e-3,
            lambda: 1.0,
            holdout_fraction: 0.1,
            calibration_quantile: 0.999,
            detector: "state-l2".to_string(),
        }
    }
}

impl DefenderSection {
    pub fn train_config(&self) -> crate::defender::DefenderTrainConfig {
        crate::defender::DefenderTrainConfig {
            hidden: self.hidden.clone(),
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            holdout_fraction: self.holdout_fraction,
        }
    }

    pub fn resolved_noise_std(&self, action_range: &[f32]) -> f32 {
        self.noise_std
            .unwrap_or_else(|| 0.1 * action_range.iter().fold(0.0f32, |m, v| m.max(*v)))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub n_episodes: usize,
    pub schedules: Vec<AttackSchedule>,
    /// Also evaluate the defended conditions on clean (attack-free) episodes
    /// to measure the defender's pass-through cost.
    pub include_defended_clean: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            n_episodes: 20,
            schedules: vec![
                AttackSchedule {
                    period: 20,
                    burst: 1,
                    start: 20,
                    enabled: true,
                },
                AttackSchedule {
                    period: 20,
                    burst: 2,
                    start: 20,
                    enabled: true,
                },
            ],
            include_defended_clean: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub env: EnvSection,
    #[serde(default)]
    pub agent: AgentConfig,
    pub trigger: TriggerSection,
    pub poison: PoisonConfig,
    #[serde(default)]
    pub defender: DefenderSection,
    #[serde(default)]
    pub eval: EvalSection,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::config(format!("config file not found: {}", path.display()))
            } else {
                Error::Io(e)
            }
        })?;
        let config: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    /// Build the configured environment.
    pub fn make_env(&self) -> Result<Box<dyn Env>> {
        make_env(&self.env.name, &self.env.overrides)
    }

    /// Cross-field validation against the configured env.
    pub fn validate(&self) -> Result<Vec<String>> {
        let env = self.make_env()?;
        let spec = env.spec();
        self.agent.validate()?;
        self.trigger.build(spec.state_dim)?;
        let mut warnings = self
            .poison
            .validate(&spec.action_low, &spec.action_high)?;
        if !(self.defender.calibration_quantile > 0.5 && self.defender.calibration_quantile <= 1.0)
        {
            return Err(Error::config(format!(
                "defender.calibration_quantile must be in (0.5, 1.0], got {}",
                self.defender.calibration_quantile
            )));
        }
        if self.defender.dataset_size == 0 {
            return Err(Error::config("defender.dataset_size must be >= 1"));
        }
        if !crate::defender::detector::DETECTOR_NAMES.contains(&self.defender.detector.as_str()) {
            return Err(Error::config(format!(
                "defender.detector '{}' unknown, available: {:?}",
                self.defender.detector,
                crate::defender::detector::DETECTOR_NAMES
            )));
        }
        if self.eval.n_episodes == 0 {
            return Err(Error::config("eval.n_episodes must be >= 1"));
        }
        for s in &self.eval.schedules {
            s.validate()?;
            if !s.enabled {
                warnings.push("eval.schedules contains a disabled schedule".to_string());
            }
        }
        Ok(warnings)
    }

    /// Hash of the resolved config with the output path blanked, so moving
    /// the output directory does not change artifact identity.
    pub fn hash(&self) -> String {
        let mut clone = self.clone();
        clone.experiment.out_dir = PathBuf::new();
        let json = serde_json::to_string(&clone).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Deterministic per-episode evaluation seeds.
    pub fn eval_seeds(&self) -> Vec<u64> {
        (0..self.eval.n_episodes as u64)
            .map(|i| crate::seeding::rng_for_indexed(self.experiment.master_seed, "eval-episode", i))
            .map(|mut rng| {
                use rand::Rng;
                rng.random::<u64>()
            })
            .collect()
    }
}

/// Convenience: a full default config for the given env, used by tests and as
/// a starting point for presets.
pub fn default_config_for(env_name: &str, out_dir: &Path) -> ExperimentConfig {
    let (target_action, trigger) = match env_name {
        "pendulum-swingup" => (
            vec![2.0],
            TriggerSection {
                mode: TriggerMode::Overwrite,
                dims: vec![2],
                values: vec![24.0],
            },
        ),
        _ => (
            vec![10.0],
            TriggerSection {
                mode: TriggerMode::Overwrite,
                dims: vec![2],
                values: vec![1.0],
            },
        ),
    };
    ExperimentConfig {
        experiment: ExperimentSection {
            name: format!("{env_name}-default"),
            out_dir: out_dir.to_path_buf(),
            master_seed: 7,
        },
        env: EnvSection {
            name: env_name.to_string(),
            overrides: Overrides::new(),
        },
        agent: AgentConfig::default(),
        trigger,
        poison: PoisonConfig {
            proportion: 0.04,
            kind: AttackKind::Targeted,
            target_action,
            fake_reward: 1.0,
            injection_start_step: 25_000,
        },
        defender: DefenderSection::default(),
        eval: EvalSection::default(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_validates() {
        let cfg = default_config_for("cartpole-continuous", Path::new("/tmp/x"));
        assert!(cfg.validate().is_ok());
        // Paper-aligned defaults.
        assert_eq!(cfg.defender.dataset_size, 50_000);
        assert_eq!(cfg.defender.hidden, vec![256, 256]);
        assert_eq!(cfg.poison.proportion, 0.04);
        assert_eq!(cfg.poison.injection_start_step, 25_000);
        assert_eq!(cfg.defender.noise_prob, 0.01);
        assert!(cfg
            .eval
            .schedules
            .iter()
            .any(|s| s.period == 20 && s.burst == 1));
        assert!(cfg
            .eval
            .schedules
            .iter()
            .any(|s| s.period == 20 && s.burst == 2));
    }

    #[test]
    fn unknown_keys_are_rejected_with_field_path() {
        let text = r#"
[experiment]
name = "x"
out_dir = "/tmp/x"
master_seed = 1

[env]
name = "cartpole-continuous"

[trigger]
mode = "overwrite"
dims = [2]
values = [1.0]

[poison]
proportion = 0.04
kind = "targeted"
target_action = [1.0]
fake_reward = 1.0
injection_start_step = 0
mystery_knob = 3
"#;
        let err = toml::from_str::<ExperimentConfig>(text).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("mystery_knob"), "{msg}");
    }

    #[test]
    fn config_hash_ignores_out_dir_but_not_seeds() {
        let a = default_config_for("cartpole-continuous", Path::new("/tmp/a"));
        let b = default_config_for("cartpole-continuous", Path::new("/tmp/b"));
        assert_eq!(a.hash(), b.hash());
        let mut c = a.clone();
        c.experiment.master_seed = 8;
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn trigger_section_rejects_bad_dims() {
        let cfg = TriggerSection {
            mode: TriggerMode::Overwrite,
            dims: vec![7],
            values: vec![1.0],
        };
        assert!(cfg.build(4).is_err());
        let dup = TriggerSection {
            mode: TriggerMode::Overwrite,
            dims: vec![1, 1],
            values: vec![1.0, 2.0],
        };
        assert!(dup.build(4).is_err());
    }

    #[test]
    fn eval_seeds_are_stable_and_distinct() {
        let cfg = default_config_for("cartpole-continuous", Path::new("/tmp/x"));
        let a = cfg.eval_seeds();
        let b = cfg.eval_seeds();
        assert_eq!(a, b);
        assert_eq!(a.len(), 20);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), a.len());
    }

    #[test]
    fn toml_round_trip_preserves_the_config() {
        let cfg = default_config_for("pendulum-swingup", Path::new("/tmp/p"));
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg.hash(), back.hash());
    }
}
