//! Torque-controlled pendulum swingup. Observation is `[cos th, sin th, thdot]`,
//! dense negative cost reward, no failure termination.

use std::f32::consts::PI;

use rand::Rng;

use super::{DoneReason, Env, EnvSpec, Overrides, StepResult};
use crate::error::{Error, Result};
use crate::seeding::rng_for_indexed;

pub const NAME: &str = "pendulum-swingup";

#[derive(Debug, Clone)]
pub struct PendulumParams {
    pub gravity: f32,
    pub mass: f32,
    pub length: f32,
    pub dt: f32,
    pub max_speed: f32,
    pub max_torque: f32,
    pub max_episode_steps: usize,
    pub init_angle_bound: f32,
    pub init_speed_bound: f32,
}

impl Default for PendulumParams {
    fn default() -> Self {
        PendulumParams {
            gravity: 10.0,
            mass: 1.0,
            length: 1.0,
            dt: 0.05,
            max_speed: 8.0,
            max_torque: 2.0,
            max_episode_steps: 200,
            init_angle_bound: PI,
            init_speed_bound: 1.0,
        }
    }
}

impl PendulumParams {
    fn apply(&mut self, key: &str, v: f64) -> Result<()> {
        let v = v as f32;
        match key {
            "gravity" => self.gravity = v,
            "mass" => self.mass = v,
            "length" => self.length = v,
            "dt" => self.dt = v,
            "max_speed" => self.max_speed = v,
            "max_torque" => self.max_torque = v,
            "max_episode_steps" => self.max_episode_steps = v as usize,
            "init_angle_bound" => self.init_angle_bound = v,
            "init_speed_bound" => self.init_speed_bound = v,
            _ => {
                return Err(super::unknown_override(
                    NAME,
                    key,
                    &[
                        "gravity",
                        "mass",
                        "length",
                        "dt",
                        "max_speed",
                        "max_torque",
                        "max_episode_steps",
                        "init_angle_bound",
                        "init_speed_bound",
                    ],
                ))
            }
        }
        Ok(())
    }
}

pub struct Pendulum {
    params: PendulumParams,
    spec: EnvSpec,
    state: Vec<f32>,
    steps: usize,
    done: bool,
}

pub fn make(overrides: &Overrides) -> Result<Box<dyn Env>> {
    let mut params = PendulumParams::default();
    for (k, v) in overrides {
        params.apply(k, *v)?;
    }
    if params.max_episode_steps == 0 {
        return Err(Error::config("max_episode_steps must be >= 1"));
    }
    Ok(Box::new(Pendulum::new(params)))
}

impl Pendulum {
    pub fn new(params: PendulumParams) -> Self {
        let spec = EnvSpec {
            name: NAME.to_string(),
            state_dim: 3,
            action_dim: 1,
            action_low: vec![-params.max_torque],
            action_high: vec![params.max_torque],
            max_episode_steps: params.max_episode_steps,
            termination: "horizon only".to_string(),
        };
        Pendulum {
            params,
            spec,
            state: vec![1.0, 0.0, 0.0],
            steps: 0,
            done: true,
        }
    }

    fn wrap(theta: f32) -> f32 {
        let mut t = (theta + PI) % (2.0 * PI);
        if t < 0.0 {
            t += 2.0 * PI;
        }
        t - PI
    }

    fn integrate(&self, obs: &[f32], torque: f32) -> Vec<f32> {
        let p = &self.params;
        let theta = obs[1].atan2(obs[0]);
        let thdot = obs[2];
        let acc = 3.0 * p.gravity / (2.0 * p.length) * theta.sin()
            + 3.0 / (p.mass * p.length * p.length) * torque;
        let new_thdot = (thdot + acc * p.dt).clamp(-p.max_speed, p.max_speed);
        let new_theta = theta + new_thdot * p.dt;
        vec![new_theta.cos(), new_theta.sin(), new_thdot]
    }
}

impl Env for Pendulum {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Vec<f32> {
        let mut rng = rng_for_indexed(seed, "reset:pendulum", 0);
        let b = self.params.init_angle_bound;
        let theta: f32 = rng.random_range(-b..b);
        let sb = self.params.init_speed_bound;
        let thdot: f32 = rng.random_range(-sb..sb);
        self.state = vec![theta.cos(), theta.sin(), thdot];
        self.steps = 0;
        self.done = false;
        self.state.clone()
    }

    fn step(&mut self, action: &[f32]) -> Result<StepResult> {
        if self.done {
            return Err(Error::contract("step called on a finished pendulum episode"));
        }
        if action.len() != 1 {
            return Err(Error::dims("pendulum step", 1, action.len()));
        }
        let u = self.spec.clip_action(action)[0];
        let next = self.true_transition(&self.state, &[u]);

        let theta = Self::wrap(self.state[1].atan2(self.state[0]));
        let thdot = self.state[2];
        let reward = -(theta * theta + 0.1 * thdot * thdot + 0.001 * u * u);

        self.state = next.clone();
        self.steps += 1;
        let done = self.steps >= self.params.max_episode_steps;
        self.done = done;
        Ok(StepResult {
            next_state: next,
            reward,
            done,
            done_reason: done.then_some(DoneReason::Horizon),
        })
    }

    fn true_transition(&self, state: &[f32], action: &[f32]) -> Vec<f32> {
        let u = self.spec.clip_action(action)[0];
        self.integrate(state, u)
    }

    fn clone_env(&self) -> Box<dyn Env> {
        Box::new(Pendulum::new(self.params.clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnum::l2_distance as l2;

    #[test]
    fn hanging_down_with_zero_torque_is_a_fixed_point() {
        let env = Pendulum::new(PendulumParams::default());
        let down = vec![(-1.0f32), 0.0, 0.0]; // theta = pi
        let next = env.true_transition(&down, &[0.0]);
        assert!(l2(&down, &next) < 1e-6, "moved by {}", l2(&down, &next));
    }

    #[test]
    fn gravity_off_zero_torque_keeps_speed_constant() {
        let mut params = PendulumParams::default();
        params.gravity = 0.0;
        let env = Pendulum::new(params);
        let mut s = vec![0.6f32.cos(), 0.6f32.sin(), 1.5];
        for _ in 0..25 {
            s = env.true_transition(&s, &[0.0]);
            assert!((s[2] - 1.5).abs() < 1e-6);
        }
    }

    #[test]
    fn transition_is_continuous_in_the_action() {
        let env = Pendulum::new(PendulumParams::default());
        let s = vec![0.2f32.cos(), 0.2f32.sin(), -0.4];
        let base = env.true_transition(&s, &[0.5]);
        let mut prev = f32::INFINITY;
        for eps in [0.1f32, 0.01, 0.001, 0.0001] {
            let moved = env.true_transition(&s, &[0.5 + eps]);
            let d = l2(&base, &moved);
            assert!(d <= prev);
            prev = d;
        }
        assert!(prev < 1e-4);
    }

    #[test]
    fn reset_respects_init_bounds() {
        let mut env = Pendulum::new(PendulumParams::default());
        for seed in 0..100 {
            let s = env.reset(seed);
            assert!(s[2].abs() <= 1.0);
            assert!((s[0] * s[0] + s[1] * s[1] - 1.0).abs() < 1e-5);
        }
    }
}
