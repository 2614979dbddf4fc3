//! DDPG actor-critic training of the victim agent, plus the trained `Policy`
//! used everywhere downstream (rollout collection, defense, evaluation).

pub mod ddpg;
pub mod replay;

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::diffnum::checkpoint::{read_mlp_section, write_mlp_section, ByteReader, ByteWriter};
use crate::diffnum::{Mlp, Tensor};
use crate::error::{Error, Result};

pub use ddpg::{
    compute_critic_targets, ddpg_update, evaluate_policy, random_policy_returns, train_agent,
    AgentConfig, DdpgTrainer, EvalEpisode, TrainOutput, TransitionHook, UpdateStats,
};
pub use replay::{ReplayBuffer, Transition};

pub const POLICY_MAGIC: &[u8; 6] = b"RTSPOL";
pub const POLICY_VERSION: u16 = 1;

/// Deterministic actor-critic pair with target copies. The actor ends in tanh;
/// `act` maps that to the action box, so emitted actions are always in bounds.
#[derive(Debug, Clone)]
pub struct Policy {
    pub actor: Mlp,
    pub critic: Mlp,
    pub actor_target: Mlp,
    pub critic_target: Mlp,
    pub gamma: f32,
    pub tau: f32,
    pub action_low: Vec<f32>,
    pub action_high: Vec<f32>,
}

impl Policy {
    pub fn new(
        state_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        gamma: f32,
        tau: f32,
        action_low: Vec<f32>,
        action_high: Vec<f32>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&gamma) || gamma <= 0.0 {
            return Err(Error::config(format!("gamma must be in (0,1), got {gamma}")));
        }
        let mut actor_dims = vec![state_dim];
        actor_dims.extend_from_slice(hidden);
        actor_dims.push(action_dim);
        let mut critic_dims = vec![state_dim + action_dim];
        critic_dims.extend_from_slice(hidden);
        critic_dims.push(1);

        use crate::diffnum::Activation::{Identity, Relu, Tanh};
        let actor = Mlp::new(actor_dims, Tanh, Tanh, rng)?;
        let critic = Mlp::new(critic_dims, Relu, Identity, rng)?;
        let actor_target = actor.clone();
        let critic_target = critic.clone();
        Ok(Policy {
            actor,
            critic,
            actor_target,
            critic_target,
            gamma,
            tau,
            action_low,
            action_high,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.actor.input_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.actor.output_dim()
    }

    /// Per-dim center of the action box.
    pub fn action_center(&self) -> Vec<f32> {
        self.action_low
            .iter()
            .zip(&self.action_high)
            .map(|(lo, hi)| 0.5 * (lo + hi))
            .collect()
    }

    /// Per-dim half width of the action box.
    pub fn action_half_range(&self) -> Vec<f32> {
        self.action_low
            .iter()
            .zip(&self.action_high)
            .map(|(lo, hi)| 0.5 * (hi - lo))
            .collect()
    }

    fn scale_to_bounds(&self, tanh_out: &mut [f32]) {
        let center = self.action_center();
        let half = self.action_half_range();
        for (i, v) in tanh_out.iter_mut().enumerate() {
            *v = center[i % center.len()] + half[i % half.len()] * *v;
        }
    }

    /// Deterministic action for one state.
    pub fn act(&self, state: &[f32]) -> Result<Vec<f32>> {
        let mut out = self.actor.forward_vec(state)?;
        self.scale_to_bounds(&mut out);
        Ok(out)
    }

    /// Deterministic actions for a `[batch, state_dim]` tensor.
    pub fn act_batch(&self, states: &Tensor) -> Result<Tensor> {
        let mut out = self.actor.forward(states)?;
        self.scale_to_bounds(out.data_mut());
        Ok(out)
    }

    /// Target-actor actions for a batch (used in critic targets).
    pub fn act_target_batch(&self, states: &Tensor) -> Result<Tensor> {
        let mut out = self.actor_target.forward(states)?;
        self.scale_to_bounds(out.data_mut());
        Ok(out)
    }

    pub fn clip_action(&self, action: &mut [f32]) {
        for (i, v) in action.iter_mut().enumerate() {
            *v = v.clamp(self.action_low[i], self.action_high[i]);
        }
    }
}

/// Deterministic actor output plus optional Gaussian noise, clipped to bounds.
pub fn select_action(
    policy: &Policy,
    state: &[f32],
    noise_std: f32,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f32>> {
    let mut action = policy.act(state)?;
    if noise_std > 0.0 {
        let normal = Normal::new(0.0f32, noise_std)
            .map_err(|e| Error::config(format!("bad noise std: {e}")))?;
        for v in action.iter_mut() {
            *v += normal.sample(rng);
        }
        policy.clip_action(&mut action);
    }
    Ok(action)
}

/// Save the full policy (all four nets plus scalars) to one container file.
pub fn save_policy(policy: &Policy, path: &Path, config_hash: &str) -> Result<()> {
    let mut w = ByteWriter::new();
    w.bytes(POLICY_MAGIC);
    w.u16(POLICY_VERSION);
    w.str(config_hash);
    w.str(crate::VERSION);
    w.f32(policy.gamma);
    w.f32(policy.tau);
    w.u32(policy.action_low.len() as u32);
    w.f32_slice(&policy.action_low);
    w.f32_slice(&policy.action_high);
    for net in [
        &policy.actor,
        &policy.critic,
        &policy.actor_target,
        &policy.critic_target,
    ] {
        write_mlp_section(&mut w, net);
    }
    std::fs::write(path, w.into_vec())?;
    Ok(())
}

pub fn load_policy(path: &Path) -> Result<Policy> {
    let buf = std::fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingArtifact {
                what: "policy checkpoint".to_string(),
                path: path.to_path_buf(),
            }
        } else {
            Error::Io(e)
        }
    })?;
    let mut r = ByteReader::new(&buf, path);
    let magic = r.take(POLICY_MAGIC.len())?;
    if magic != POLICY_MAGIC {
        return Err(r.format_err("bad magic, not a policy checkpoint"));
    }
    let version = r.u16()?;
    if version != POLICY_VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            found: version,
            supported: POLICY_VERSION,
        });
    }
    let _config_hash = r.str()?;
    let _tool_version = r.str()?;
    let gamma = r.f32()?;
    let tau = r.f32()?;
    let adim = r.u32()? as usize;
    let action_low = r.f32_vec(adim)?;
    let action_high = r.f32_vec(adim)?;
    let actor = read_mlp_section(&mut r)?;
    let critic = read_mlp_section(&mut r)?;
    let actor_target = read_mlp_section(&mut r)?;
    let critic_target = read_mlp_section(&mut r)?;
    r.expect_end()?;
    Ok(Policy {
        actor,
        critic,
        actor_target,
        critic_target,
        gamma,
        tau,
        action_low,
        action_high,
    })
}
