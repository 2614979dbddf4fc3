//! Evaluation harness: runs episodes under configurable attack schedules and
//! protection conditions, tracking ground truth alongside what the agent saw
//! so detection quality and recovery losses can be scored exactly.

pub mod report;

use serde::{Deserialize, Serialize};

use crate::agent::Policy;
use crate::backdoor::{apply_trigger, Trigger};
use crate::defender::{guard_step, Detector, DynamicsModel};
use crate::diffnum::l2_distance;
use crate::envs::{DoneReason, Env};
use crate::error::{Error, Result};

/// Periodic attack pattern: bursts of `burst` consecutive attacked
/// observations, one burst every `period` steps, first onset at `start`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSchedule {
    pub period: usize,
    pub burst: usize,
    #[serde(default = "default_attack_start")]
    pub start: usize,
    #[serde(default = "default_true")]
    pub enabled: bool,
}

fn default_attack_start() -> usize {
    20
}

fn default_true() -> bool {
    true
}

impl AttackSchedule {
    pub fn disabled() -> Self {
        AttackSchedule {
            period: 20,
            burst: 1,
            start: 20,
            enabled: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.enabled && (self.burst < 1 || self.period < self.burst) {
            return Err(Error::config(format!(
                "attack schedule requires period >= burst >= 1, got period {} burst {}",
                self.period, self.burst
            )));
        }
        if self.enabled && self.start < 1 {
            return Err(Error::config("attack start must be >= 1"));
        }
        Ok(())
    }

    /// Is the observation produced by step `n` (1-based) attacked?
    pub fn is_attacked(&self, n: usize) -> bool {
        self.enabled && n >= self.start && (n - self.start) % self.period < self.burst
    }

    pub fn label(&self) -> String {
        if self.enabled {
            format!("p{}b{}", self.period, self.burst)
        } else {
            "none".to_string()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProtectionCondition {
    UnprotectedClean,
    UnprotectedAttacked,
    SingleObjectiveDefended,
    DualObjectiveDefended,
}

impl ProtectionCondition {
    pub const ALL: [ProtectionCondition; 4] = [
        ProtectionCondition::UnprotectedClean,
        ProtectionCondition::UnprotectedAttacked,
        ProtectionCondition::SingleObjectiveDefended,
        ProtectionCondition::DualObjectiveDefended,
    ];

    pub fn label(self) -> &'static str {
        match self {
            ProtectionCondition::UnprotectedClean => "unprotected-clean",
            ProtectionCondition::UnprotectedAttacked => "unprotected-attacked",
            ProtectionCondition::SingleObjectiveDefended => "single-objective-defended",
            ProtectionCondition::DualObjectiveDefended => "dual-objective-defended",
        }
    }

    pub fn attacks(self) -> bool {
        self != ProtectionCondition::UnprotectedClean
    }

    pub fn defended(self) -> bool {
        matches!(
            self,
            ProtectionCondition::SingleObjectiveDefended
                | ProtectionCondition::DualObjectiveDefended
        )
    }
}

/// Defender artifacts used during an episode.
pub struct DefenderHandle<'a> {
    pub model: &'a DynamicsModel,
    pub h: f32,
    pub metric: &'a dyn Detector,
}

/// Per-step record kept in memory for loss computation and detection scoring.
#[derive(Debug, Clone)]
pub struct StepTrace {
    pub step: usize,
    pub attacked: bool,
    pub flagged: bool,
    pub residual: Option<f32>,
    pub true_next: Vec<f32>,
    pub incoming: Vec<f32>,
    pub chosen: Vec<f32>,
    /// Length-1 prediction from the true previous state and executed action.
    pub diag_pred: Option<Vec<f32>>,
}

#[derive(Debug, Clone)]
pub struct EpisodeRecord {
    pub condition: &'static str,
    pub schedule_label: String,
    pub seed: u64,
    pub episode_return: f32,
    pub length: usize,
    pub done_reason: &'static str,
    pub attacked_steps: usize,
    pub flagged_steps: usize,
    pub true_positives: usize,
    pub false_positives: usize,
    pub mean_residual: Option<f32>,
    pub max_residual: Option<f32>,
    pub state_loss: Option<f32>,
    pub action_loss: Option<f32>,
    pub trace: Vec<StepTrace>,
}

/// Run one evaluation episode. The attacker perturbs incoming observations on
/// scheduled steps; when a defender is present every observation passes
/// through the recovery guard, which chains predictions through previously
/// recovered states. Ground truth states are recorded alongside for scoring.
pub fn run_episode(
    policy: &Policy,
    env: &mut dyn Env,
    schedule: AttackSchedule,
    trigger: Option<&Trigger>,
    defender: Option<&DefenderHandle<'_>>,
    seed: u64,
) -> Result<EpisodeRecord> {
    schedule.validate()?;
    if schedule.enabled && trigger.is_none() {
        return Err(Error::contract(
            "an enabled attack schedule requires a trigger",
        ));
    }

    let mut s_chosen = env.reset(seed);
    let mut s_true = s_chosen.clone();
    let mut trace: Vec<StepTrace> = Vec::new();
    let mut episode_return = 0.0f32;
    let mut n = 0usize;
    let done_reason;

    loop {
        let action = policy.act(&s_chosen)?;
        let step = env.step(&action)?;
        episode_return += step.reward;
        n += 1;
        let true_next = step.next_state;

        if step.done {
            done_reason = match step.done_reason {
                Some(DoneReason::Failure) => "failure",
                _ => "horizon",
            };
            break;
        }

        let attacked = schedule.is_attacked(n) && trigger.is_some();
        let incoming = match (attacked, trigger) {
            (true, Some(t)) => apply_trigger(t, &true_next),
            _ => true_next.clone(),
        };

        let (chosen, flagged, residual) = match defender {
            Some(d) => {
                let out = guard_step(d.model, d.h, &s_chosen, &action, &incoming, d.metric)?;
                (out.chosen, out.flagged, Some(out.residual))
            }
            None => (incoming.clone(), false, None),
        };

        let diag_pred = match defender {
            Some(d) => Some(d.model.predict(&s_true, &action)?),
            None => None,
        };

        trace.push(StepTrace {
            step: n,
            attacked,
            flagged,
            residual,
            true_next: true_next.clone(),
            incoming,
            chosen: chosen.clone(),
            diag_pred,
        });

        s_chosen = chosen;
        s_true = true_next;
    }

    let attacked_steps = trace.iter().filter(|t| t.attacked).count();
    let flagged_steps = trace.iter().filter(|t| t.flagged).count();
    let true_positives = trace.iter().filter(|t| t.flagged && t.attacked).count();
    let false_positives = trace.iter().filter(|t| t.flagged && !t.attacked).count();
    let residuals: Vec<f32> = trace.iter().filter_map(|t| t.residual).collect();
    let (mean_residual, max_residual) = if residuals.is_empty() {
        (None, None)
    } else {
        (
            Some(residuals.iter().sum::<f32>() / residuals.len() as f32),
            Some(residuals.iter().fold(0.0f32, |m, v| m.max(*v))),
        )
    };

    let pairs = loss_pairs(&trace);
    let (state_loss, action_loss) = if pairs.is_empty() {
        (None, None)
    } else {
        let (s, a) = compute_losses(&pairs, policy)?;
        (Some(s), Some(a))
    };

    Ok(EpisodeRecord {
        condition: "",
        schedule_label: schedule.label(),
        seed,
        episode_return,
        length: n,
        done_reason,
        attacked_steps,
        flagged_steps,
        true_positives,
        false_positives,
        mean_residual,
        max_residual,
        state_loss,
        action_loss,
        trace,
    })
}

/// (true next state, length-1 predicted state) pairs from a trace.
pub fn loss_pairs(trace: &[StepTrace]) -> Vec<(Vec<f32>, Vec<f32>)> {
    trace
        .iter()
        .filter_map(|t| {
            t.diag_pred
                .as_ref()
                .map(|p| (t.true_next.clone(), p.clone()))
        })
        .collect()
}

/// Mean state loss `||s' - s_p||` and action loss `||pi(s') - pi(s_p)||` over
/// (real, predicted) pairs from a length-1 prediction task.
pub fn compute_losses(
    pairs: &[(Vec<f32>, Vec<f32>)],
    policy: &Policy,
) -> Result<(f32, f32)> {
    if pairs.is_empty() {
        return Err(Error::contract("compute_losses needs at least one pair"));
    }
    let mut state_sum = 0.0f64;
    let mut action_sum = 0.0f64;
    for (real, pred) in pairs {
        state_sum += l2_distance(real, pred) as f64;
        let a_real = policy.act(real)?;
        let a_pred = policy.act(pred)?;
        action_sum += l2_distance(&a_real, &a_pred) as f64;
    }
    let n = pairs.len() as f64;
    Ok(((state_sum / n) as f32, (action_sum / n) as f32))
}

/// Mean distance between the action on the true state and the action on the
/// state the agent actually acted on, over attacked steps. Without a defender
/// this is the raw trigger-induced action shift; with one it measures how well
/// recovery restores the action.
pub fn attacked_action_distance(records: &[EpisodeRecord], policy: &Policy) -> Result<f32> {
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for rec in records {
        for t in rec.trace.iter().filter(|t| t.attacked) {
            let a_true = policy.act(&t.true_next)?;
            let a_acted = policy.act(&t.chosen)?;
            sum += l2_distance(&a_true, &a_acted) as f64;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::contract("no attacked steps in the given records"));
    }
    Ok((sum / count as f64) as f32)
}

/// One cell of the evaluation matrix.
#[derive(Debug, Clone, Copy)]
pub struct MatrixCell {
    pub condition: ProtectionCondition,
    pub schedule: AttackSchedule,
}

/// Everything needed to evaluate any condition.
pub struct EvalArtifacts<'a> {
    pub policy: &'a Policy,
    pub env: &'a dyn Env,
    pub trigger: &'a Trigger,
    pub single: (&'a DynamicsModel, f32),
    pub dual: (&'a DynamicsModel, f32),
    pub metric: &'a dyn Detector,
}

/// Evaluate every cell on the same seed list (paired comparison). Records are
/// ordered by (cell order, seed order) and are deterministic.
pub fn evaluate_matrix(
    artifacts: &EvalArtifacts<'_>,
    cells: &[MatrixCell],
    seeds: &[u64],
) -> Result<Vec<EpisodeRecord>> {
    let mut records = Vec::with_capacity(cells.len() * seeds.len());
    for cell in cells {
        let schedule = if cell.condition.attacks() {
            cell.schedule
        } else {
            AttackSchedule {
                enabled: false,
                ..cell.schedule
            }
        };
        for &seed in seeds {
            let mut env = artifacts.env.clone_env();
            let handle_storage;
            let defender = match cell.condition {
                ProtectionCondition::SingleObjectiveDefended => {
                    handle_storage = DefenderHandle {
                        model: artifacts.single.0,
                        h: artifacts.single.1,
                        metric: artifacts.metric,
                    };
                    Some(&handle_storage)
                }
                ProtectionCondition::DualObjectiveDefended => {
                    handle_storage = DefenderHandle {
                        model: artifacts.dual.0,
                        h: artifacts.dual.1,
                        metric: artifacts.metric,
                    };
                    Some(&handle_storage)
                }
                _ => None,
            };
            let mut rec = run_episode(
                artifacts.policy,
                env.as_mut(),
                schedule,
                Some(artifacts.trigger),
                defender,
                seed,
            )?;
            rec.condition = cell.condition.label();
            // Keep the cell's schedule label even for the clean condition so
            // rows group as configured.
            rec.schedule_label = if cell.condition.attacks() {
                cell.schedule.label()
            } else {
                "none".to_string()
            };
            records.push(rec);
        }
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::make_env;
    use crate::seeding::rng_for;

    fn test_policy(env: &dyn Env, seed: u64) -> Policy {
        let spec = env.spec();
        let mut rng = rng_for(seed, "harness-test");
        Policy::new(
            spec.state_dim,
            spec.action_dim,
            &[8],
            0.99,
            0.005,
            spec.action_low.clone(),
            spec.action_high.clone(),
            &mut rng,
        )
        .unwrap()
    }

    #[test]
    fn schedule_marks_expected_steps() {
        let s = AttackSchedule {
            period: 20,
            burst: 2,
            start: 20,
            enabled: true,
        };
        let attacked: Vec<usize> = (1..=80).filter(|&n| s.is_attacked(n)).collect();
        assert_eq!(attacked, vec![20, 21, 40, 41, 60, 61, 80]);
        assert!(!AttackSchedule::disabled().is_attacked(20));
    }

    #[test]
    fn schedule_validation_rejects_burst_above_period() {
        let s = AttackSchedule {
            period: 2,
            burst: 3,
            start: 20,
            enabled: true,
        };
        assert!(s.validate().is_err());
    }

    #[test]
    fn clean_episode_matches_plain_evaluation() {
        let mut env = make_env("pendulum-swingup", &Default::default()).unwrap();
        let policy = test_policy(env.as_ref(), 101);
        let rec = run_episode(
            &policy,
            env.as_mut(),
            AttackSchedule::disabled(),
            None,
            None,
            77,
        )
        .unwrap();
        let evals = crate::agent::evaluate_policy(&policy, env.as_mut(), &[77]).unwrap();
        assert_eq!(rec.episode_return, evals[0].episode_return);
        assert_eq!(rec.length, evals[0].length);
        assert_eq!(rec.attacked_steps, 0);
        assert_eq!(rec.flagged_steps, 0);
    }

    #[test]
    fn enabled_schedule_without_trigger_is_a_contract_error() {
        let mut env = make_env("pendulum-swingup", &Default::default()).unwrap();
        let policy = test_policy(env.as_ref(), 102);
        let schedule = AttackSchedule {
            period: 20,
            burst: 1,
            start: 20,
            enabled: true,
        };
        assert!(matches!(
            run_episode(&policy, env.as_mut(), schedule, None, None, 1),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn attacked_steps_follow_the_schedule() {
        let mut env = make_env("pendulum-swingup", &Default::default()).unwrap();
        let policy = test_policy(env.as_ref(), 103);
        let trigger = crate::backdoor::Trigger::overwrite(3, &[2], &[24.0]).unwrap();
        let schedule = AttackSchedule {
            period: 20,
            burst: 1,
            start: 20,
            enabled: true,
        };
        let rec = run_episode(&policy, env.as_mut(), schedule, Some(&trigger), None, 7).unwrap();
        // Pendulum runs the full 200-step horizon; observation 200 is terminal
        // and never delivered, so onsets are 20, 40, ..., 180.
        assert_eq!(rec.length, 200);
        assert_eq!(rec.attacked_steps, 9);
        for t in &rec.trace {
            assert_eq!(t.attacked, schedule.is_attacked(t.step));
            if t.attacked {
                assert_eq!(t.incoming[2], 24.0);
                // Unmasked dims pass through bit-identical.
                assert_eq!(t.incoming[0], t.true_next[0]);
            }
        }
    }

    #[test]
    fn compute_losses_matches_hand_arithmetic() {
        let mut env = make_env("pendulum-swingup", &Default::default()).unwrap();
        let policy = test_policy(env.as_ref(), 104);
        let s1 = vec![1.0f32, 0.0, 0.0];
        let p1 = vec![1.0f32, 0.0, 1.0]; // state distance 1
        let s2 = vec![0.0f32, 1.0, 0.0];
        let p2 = vec![0.0f32, 1.0, 3.0]; // state distance 3
        let pairs = vec![(s1.clone(), p1.clone()), (s2.clone(), p2.clone())];
        let (state_loss, action_loss) = compute_losses(&pairs, &policy).unwrap();
        assert!((state_loss - 2.0).abs() < 1e-6);
        let a = |s: &[f32]| policy.act(s).unwrap()[0];
        let expect = (((a(&s1) - a(&p1)).powi(2)).sqrt() + ((a(&s2) - a(&p2)).powi(2)).sqrt()) / 2.0;
        assert!((action_loss - expect).abs() < 1e-6);
    }

    #[test]
    fn identical_pairs_have_zero_losses() {
        let mut env = make_env("pendulum-swingup", &Default::default()).unwrap();
        let policy = test_policy(env.as_ref(), 105);
        let s = vec![0.5f32, 0.5, 0.5];
        let (sl, al) = compute_losses(&[(s.clone(), s.clone())], &policy).unwrap();
        assert_eq!(sl, 0.0);
        assert_eq!(al, 0.0);
    }

    #[test]
    fn empty_pairing_is_a_contract_error() {
        let mut env = make_env("pendulum-swingup", &Default::default()).unwrap();
        let policy = test_policy(env.as_ref(), 106);
        assert!(matches!(
            compute_losses(&[], &policy),
            Err(Error::Contract(_))
        ));
    }
}
