//! Force-controlled cart-pole balance. State `[x, xdot, th, thdot]`, +1 reward
//! per step, failure termination when the pole angle or cart position leaves
//! its limit. Failure semantics make it the fall-prone analogue of a legged
//! locomotion task: a few bad actions end the episode and forfeit the return.

use rand::Rng;

use super::{DoneReason, Env, EnvSpec, Overrides, StepResult};
use crate::error::{Error, Result};
use crate::seeding::rng_for_indexed;

pub const NAME: &str = "cartpole-continuous";

#[derive(Debug, Clone)]
pub struct CartpoleParams {
    pub gravity: f32,
    pub masscart: f32,
    pub masspole: f32,
    /// Half the pole length, as in the classic formulation.
    pub half_length: f32,
    pub force_mag: f32,
    pub dt: f32,
    pub theta_limit: f32,
    pub x_limit: f32,
    pub max_episode_steps: usize,
    pub init_bound: f32,
}

impl Default for CartpoleParams {
    fn default() -> Self {
        CartpoleParams {
            gravity: 9.8,
            masscart: 1.0,
            masspole: 0.1,
            half_length: 0.5,
            force_mag: 10.0,
            dt: 0.02,
            theta_limit: 0.2095,
            x_limit: 2.4,
            max_episode_steps: 200,
            init_bound: 0.05,
        }
    }
}

impl CartpoleParams {
    fn apply(&mut self, key: &str, v: f64) -> Result<()> {
        let v = v as f32;
        match key {
            "gravity" => self.gravity = v,
            "masscart" => self.masscart = v,
            "masspole" => self.masspole = v,
            "half_length" => self.half_length = v,
            "force_mag" => self.force_mag = v,
            "dt" => self.dt = v,
            "theta_limit" => self.theta_limit = v,
            "x_limit" => self.x_limit = v,
            "max_episode_steps" => self.max_episode_steps = v as usize,
            "init_bound" => self.init_bound = v,
            _ => {
                return Err(super::unknown_override(
                    NAME,
                    key,
                    &[
                        "gravity",
                        "masscart",
                        "masspole",
                        "half_length",
                        "force_mag",
                        "dt",
                        "theta_limit",
                        "x_limit",
                        "max_episode_steps",
                        "init_bound",
                    ],
                ))
            }
        }
        Ok(())
    }
}

pub struct Cartpole {
    params: CartpoleParams,
    spec: EnvSpec,
    state: Vec<f32>,
    steps: usize,
    done: bool,
}

pub fn make(overrides: &Overrides) -> Result<Box<dyn Env>> {
    let mut params = CartpoleParams::default();
    for (k, v) in overrides {
        params.apply(k, *v)?;
    }
    if params.max_episode_steps == 0 {
        return Err(Error::config("max_episode_steps must be >= 1"));
    }
    Ok(Box::new(Cartpole::new(params)))
}

impl Cartpole {
    pub fn new(params: CartpoleParams) -> Self {
        let spec = EnvSpec {
            name: NAME.to_string(),
            state_dim: 4,
            action_dim: 1,
            action_low: vec![-params.force_mag],
            action_high: vec![params.force_mag],
            max_episode_steps: params.max_episode_steps,
            termination: format!(
                "failure when |theta| > {} or |x| > {}",
                params.theta_limit, params.x_limit
            ),
        };
        Cartpole {
            params,
            spec,
            state: vec![0.0; 4],
            steps: 0,
            done: true,
        }
    }

    fn failed(&self, state: &[f32]) -> bool {
        state[2].abs() > self.params.theta_limit || state[0].abs() > self.params.x_limit
    }
}

impl Env for Cartpole {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Vec<f32> {
        let mut rng = rng_for_indexed(seed, "reset:cartpole", 0);
        let b = self.params.init_bound;
        self.state = (0..4).map(|_| rng.random_range(-b..b)).collect();
        self.steps = 0;
        self.done = false;
        self.state.clone()
    }

    fn step(&mut self, action: &[f32]) -> Result<StepResult> {
        if self.done {
            return Err(Error::contract("step called on a finished cartpole episode"));
        }
        if action.len() != 1 {
            return Err(Error::dims("cartpole step", 1, action.len()));
        }
        let next = self.true_transition(&self.state, action);
        self.state = next.clone();
        self.steps += 1;

        let failed = self.failed(&next);
        let horizon = self.steps >= self.params.max_episode_steps;
        let done = failed || horizon;
        self.done = done;
        Ok(StepResult {
            next_state: next,
            reward: 1.0,
            done,
            done_reason: if failed {
                Some(DoneReason::Failure)
            } else if horizon {
                Some(DoneReason::Horizon)
            } else {
                None
            },
        })
    }

    fn true_transition(&self, state: &[f32], action: &[f32]) -> Vec<f32> {
        let p = &self.params;
        let force = self.spec.clip_action(action)[0];
        let (x, xdot, th, thdot) = (state[0], state[1], state[2], state[3]);
        let total_mass = p.masscart + p.masspole;
        let polemass_length = p.masspole * p.half_length;
        let (sin, cos) = th.sin_cos();

        let temp = (force + polemass_length * thdot * thdot * sin) / total_mass;
        let th_acc = (p.gravity * sin - cos * temp)
            / (p.half_length * (4.0 / 3.0 - p.masspole * cos * cos / total_mass));
        let x_acc = temp - polemass_length * th_acc * cos / total_mass;

        vec![
            x + p.dt * xdot,
            xdot + p.dt * x_acc,
            th + p.dt * thdot,
            thdot + p.dt * th_acc,
        ]
    }

    fn clone_env(&self) -> Box<dyn Env> {
        Box::new(Cartpole::new(self.params.clone()))
    }
}
