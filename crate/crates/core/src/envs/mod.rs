//! Deterministic continuous-control environments with analytically known
//! transition functions. Each env exposes `true_transition`, the ground-truth
//! next-state oracle that the learned dynamics model approximates.
//!
//! Environments are registered by name and constructed from a table of
//! physics overrides, so a config file fully determines the dynamics.

pub mod cartpole;
pub mod pendulum;

use std::collections::BTreeMap;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DoneReason {
    Horizon,
    Failure,
}

#[derive(Debug, Clone)]
pub struct StepResult {
    pub next_state: Vec<f32>,
    pub reward: f32,
    pub done: bool,
    pub done_reason: Option<DoneReason>,
}

#[derive(Debug, Clone)]
pub struct EnvSpec {
    pub name: String,
    pub state_dim: usize,
    pub action_dim: usize,
    pub action_low: Vec<f32>,
    pub action_high: Vec<f32>,
    pub max_episode_steps: usize,
    pub termination: String,
}

impl EnvSpec {
    pub fn clip_action(&self, action: &[f32]) -> Vec<f32> {
        action
            .iter()
            .zip(self.action_low.iter().zip(&self.action_high))
            .map(|(a, (lo, hi))| a.clamp(*lo, *hi))
            .collect()
    }

    pub fn action_range(&self) -> Vec<f32> {
        self.action_low
            .iter()
            .zip(&self.action_high)
            .map(|(lo, hi)| hi - lo)
            .collect()
    }
}

pub trait Env: Send {
    fn spec(&self) -> &EnvSpec;

    /// Deterministic initial state for the seed; resets step counters.
    fn reset(&mut self, seed: u64) -> Vec<f32>;

    /// Advance one step. The action is clipped to bounds before integration.
    /// Stepping a finished episode is a contract error.
    fn step(&mut self, action: &[f32]) -> Result<StepResult>;

    /// Ground-truth transition: pure, side-effect free, identical to the
    /// state update performed by `step`.
    fn true_transition(&self, state: &[f32], action: &[f32]) -> Vec<f32>;

    /// Fresh instance with the same physics (for concurrent episodes).
    fn clone_env(&self) -> Box<dyn Env>;
}

/// Physics overrides keyed by parameter name. BTreeMap keeps serialization
/// (and thus the config hash) order-independent.
pub type Overrides = BTreeMap<String, f64>;

pub struct EnvDef {
    pub name: &'static str,
    pub make: fn(&Overrides) -> Result<Box<dyn Env>>,
}

pub fn registry() -> &'static [EnvDef] {
    &[
        EnvDef {
            name: pendulum::NAME,
            make: pendulum::make,
        },
        EnvDef {
            name: cartpole::NAME,
            make: cartpole::make,
        },
    ]
}

/// Construct an environment by registry name.
pub fn make_env(name: &str, overrides: &Overrides) -> Result<Box<dyn Env>> {
    for def in registry() {
        if def.name == name {
            return (def.make)(overrides);
        }
    }
    let known: Vec<&str> = registry().iter().map(|d| d.name).collect();
    Err(Error::config(format!(
        "unknown env '{name}', available: {known:?}"
    )))
}

pub(crate) fn unknown_override(env: &str, key: &str, known: &[&str]) -> Error {
    Error::config(format!(
        "unknown physics override '{key}' for env '{env}', available: {known:?}"
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_lists_both_envs() {
        let names: Vec<&str> = registry().iter().map(|d| d.name).collect();
        assert_eq!(names, vec!["pendulum-swingup", "cartpole-continuous"]);
    }

    #[test]
    fn unknown_env_is_a_config_error() {
        assert!(matches!(
            make_env("hopper", &Overrides::new()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn same_seed_same_reset_different_seeds_differ() {
        for name in ["pendulum-swingup", "cartpole-continuous"] {
            let mut env = make_env(name, &Overrides::new()).unwrap();
            let a = env.reset(42);
            let b = env.reset(42);
            assert_eq!(a, b, "{name} reset not deterministic");
            let c = env.reset(43);
            assert_ne!(a, c, "{name} distinct seeds produced identical states");
        }
    }

    #[test]
    fn step_matches_true_transition_on_random_pairs() {
        use rand::Rng;
        for name in ["pendulum-swingup", "cartpole-continuous"] {
            let mut env = make_env(name, &Overrides::new()).unwrap();
            let mut rng = crate::seeding::rng_for(9, "env-agree");
            for trial in 0..1000 {
                let s = env.reset(trial);
                let a: Vec<f32> = env
                    .spec()
                    .action_low
                    .iter()
                    .zip(&env.spec().action_high)
                    .map(|(lo, hi)| rng.random_range(*lo..*hi))
                    .collect();
                let oracle = env.true_transition(&s, &a);
                let step = env.step(&a).unwrap();
                assert_eq!(step.next_state, oracle, "{name} step != true_transition");
            }
        }
    }

    #[test]
    fn stepping_finished_episode_is_a_contract_error() {
        let mut env = make_env("cartpole-continuous", &Overrides::new()).unwrap();
        env.reset(0);
        loop {
            let r = env.step(&[1000.0]).unwrap();
            if r.done {
                break;
            }
        }
        assert!(matches!(env.step(&[0.0]), Err(Error::Contract(_))));
    }

    #[test]
    fn trajectories_are_bitwise_reproducible() {
        let run = || {
            let mut env = make_env("pendulum-swingup", &Overrides::new()).unwrap();
            let mut out = Vec::new();
            let mut s = env.reset(5);
            for i in 0..50 {
                let a = [(i as f32 * 0.37).sin()];
                let r = env.step(&a).unwrap();
                out.push((s.clone(), r.reward, r.next_state.clone()));
                s = r.next_state;
            }
            out
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn states_stay_finite_under_bounded_actions() {
        use rand::Rng;
        for name in ["pendulum-swingup", "cartpole-continuous"] {
            let mut env = make_env(name, &Overrides::new()).unwrap();
            let mut rng = crate::seeding::rng_for(10, "env-finite");
            env.reset(1);
            loop {
                let a: Vec<f32> = (0..env.spec().action_dim)
                    .map(|_| rng.random_range(-1000.0..1000.0))
                    .collect();
                let r = env.step(&a).unwrap();
                assert!(r.next_state.iter().all(|v| v.is_finite()));
                assert!(r.reward.is_finite());
                if r.done {
                    break;
                }
            }
        }
    }
}
