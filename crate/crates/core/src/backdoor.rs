//! Trigger definition, injection-stage data poisoning, and trigger-stage
//! state perturbation.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::agent::{Transition, TransitionHook};
use crate::error::{Error, Result};
use crate::seeding::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TriggerMode {
    Additive,
    Overwrite,
}

/// Perturbation pattern applied to observed states. `mask` selects the dims,
/// `delta` carries the per-dim offset (additive) or replacement value
/// (overwrite).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trigger {
    pub mask: Vec<bool>,
    pub delta: Vec<f32>,
    pub mode: TriggerMode,
}

impl Trigger {
    /// Overwrite the listed dims with the listed values.
    pub fn overwrite(state_dim: usize, dims: &[usize], values: &[f32]) -> Result<Self> {
        let mut mask = vec![false; state_dim];
        let mut delta = vec![0.0; state_dim];
        for (d, v) in dims.iter().zip(values) {
            if *d >= state_dim {
                return Err(Error::config(format!(
                    "trigger dim {d} out of range for state_dim {state_dim}"
                )));
            }
            mask[*d] = true;
            delta[*d] = *v;
        }
        let t = Trigger {
            mask,
            delta,
            mode: TriggerMode::Overwrite,
        };
        t.validate(state_dim)?;
        Ok(t)
    }

    pub fn validate(&self, state_dim: usize) -> Result<()> {
        if self.mask.len() != state_dim || self.delta.len() != state_dim {
            return Err(Error::dims(
                "trigger",
                state_dim,
                format!("mask {} / delta {}", self.mask.len(), self.delta.len()),
            ));
        }
        if !self.mask.iter().any(|m| *m) {
            return Err(Error::config("trigger must select at least one state dim"));
        }
        Ok(())
    }
}

/// Apply the trigger. Unmasked dims are returned bit-identical.
pub fn apply_trigger(trigger: &Trigger, state: &[f32]) -> Vec<f32> {
    debug_assert_eq!(state.len(), trigger.mask.len());
    state
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if trigger.mask[i] {
                match trigger.mode {
                    TriggerMode::Additive => v + trigger.delta[i],
                    TriggerMode::Overwrite => trigger.delta[i],
                }
            } else {
                v
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    Targeted,
    Untargeted,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoisonConfig {
    /// Fraction of stored transitions to corrupt.
    pub proportion: f64,
    pub kind: AttackKind,
    /// Action the backdoor binds to (targeted attacks).
    pub target_action: Vec<f32>,
    pub fake_reward: f32,
    /// Records inserted before this step are never touched.
    pub injection_start_step: u64,
}

impl PoisonConfig {
    /// Validate and collect non-fatal warnings.
    pub fn validate(&self, action_low: &[f32], action_high: &[f32]) -> Result<Vec<String>> {
        let mut warnings = Vec::new();
        if !(self.proportion > 0.0 && self.proportion < 1.0) {
            return Err(Error::config(format!(
                "poison proportion must be in (0,1), got {}",
                self.proportion
            )));
        }
        if self.proportion > 0.1 {
            warnings.push(format!(
                "poison proportion {} is unusually high; stealth checks may fail",
                self.proportion
            ));
        }
        if self.target_action.len() != action_low.len() {
            return Err(Error::dims(
                "poison target_action",
                action_low.len(),
                self.target_action.len(),
            ));
        }
        for (i, a) in self.target_action.iter().enumerate() {
            if *a < action_low[i] || *a > action_high[i] {
                return Err(Error::config(format!(
                    "target_action[{i}] = {a} outside bounds [{}, {}]",
                    action_low[i], action_high[i]
                )));
            }
        }
        Ok(warnings)
    }
}

/// Corrupt one record. Targeted: triggered state, target action, fake reward.
/// Untargeted: triggered state and fake reward only; the stored (exploratory)
/// action is kept, rewarding whatever the agent happened to do.
pub fn poison_transition(trigger: &Trigger, config: &PoisonConfig, t: &Transition) -> Transition {
    let mut out = t.clone();
    out.state = apply_trigger(trigger, &t.state);
    out.reward = config.fake_reward;
    if config.kind == AttackKind::Targeted {
        out.action = config.target_action.clone();
    }
    out
}

/// Replace `floor(p * len)` uniformly chosen records at buffer indices >=
/// `injection_start_step`. Returns the sorted list of poisoned indices.
pub fn poison_buffer(
    trigger: &Trigger,
    config: &PoisonConfig,
    buffer: &mut crate::agent::ReplayBuffer,
    seed: u64,
) -> Result<Vec<usize>> {
    if buffer.is_empty() {
        return Err(Error::contract("cannot poison an empty buffer"));
    }
    let n = buffer.len();
    let want = (config.proportion * n as f64).floor() as usize;
    if want == 0 {
        eprintln!("warning: proportion {} of {n} records rounds to zero poisons", config.proportion);
        return Ok(Vec::new());
    }
    let start = config.injection_start_step as usize;
    let mut eligible: Vec<usize> = (start.min(n)..n).collect();
    let count = if eligible.len() < want {
        eprintln!(
            "warning: only {} records after injection start, capping poisons at that (wanted {want})",
            eligible.len()
        );
        eligible.len()
    } else {
        want
    };
    let mut rng = rng_for(seed, "poison-buffer");
    eligible.shuffle(&mut rng);
    let mut chosen: Vec<usize> = eligible.into_iter().take(count).collect();
    chosen.sort_unstable();
    for &i in &chosen {
        let poisoned = poison_transition(trigger, config, buffer.get(i).unwrap());
        *buffer.get_mut(i).unwrap() = poisoned;
    }
    Ok(chosen)
}

/// Online poisoner for the training loop: the poisoned insert indices are
/// fixed up front from the run length, so the corrupted count is exactly
/// `floor(p * total_steps)` and every index falls after the injection start.
pub struct Poisoner {
    trigger: Trigger,
    config: PoisonConfig,
    indices: HashSet<u64>,
}

impl Poisoner {
    pub fn plan(trigger: Trigger, config: PoisonConfig, total_steps: u64, seed: u64) -> Result<Self> {
        let want = (config.proportion * total_steps as f64).floor() as u64;
        let start = config.injection_start_step.min(total_steps);
        let eligible_count = total_steps - start;
        if want > eligible_count {
            return Err(Error::config(format!(
                "cannot place {want} poisons in {eligible_count} post-injection steps"
            )));
        }
        let mut eligible: Vec<u64> = (start..total_steps).collect();
        let mut rng = rng_for(seed, "poison-plan");
        eligible.shuffle(&mut rng);
        let indices: HashSet<u64> = eligible.into_iter().take(want as usize).collect();
        Ok(Poisoner {
            trigger,
            config,
            indices,
        })
    }

    pub fn poison_count(&self) -> usize {
        self.indices.len()
    }

    /// Sorted audit list of planned poison insert-indices.
    pub fn planned_indices(&self) -> Vec<u64> {
        let mut v: Vec<u64> = self.indices.iter().copied().collect();
        v.sort_unstable();
        v
    }

    pub fn trigger(&self) -> &Trigger {
        &self.trigger
    }
}

impl TransitionHook for Poisoner {
    fn process(&self, insert_index: u64, t: Transition) -> Transition {
        if self.indices.contains(&insert_index) {
            poison_transition(&self.trigger, &self.config, &t)
        } else {
            t
        }
    }
}
