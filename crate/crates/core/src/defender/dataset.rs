//! Rollout dataset for dynamics-model training: `(s_prev, a_prev, s_next,
//! a_next)` tuples collected from the victim policy in a clean environment.
//! `a_prev` is the executed (possibly exploration-noised) action that explains
//! the transition; `a_next` is the policy's noiseless action on `s_next` and
//! serves as the action-consistency target.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::agent::Policy;
use crate::diffnum::checkpoint::{ByteReader, ByteWriter};
use crate::envs::Env;
use crate::error::{Error, Result};
use crate::seeding::{episode_seed, rng_for};

pub const DATASET_MAGIC: &[u8; 6] = b"RTSDAT";
pub const DATASET_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutTuple {
    pub s_prev: Vec<f32>,
    pub a_prev: Vec<f32>,
    pub s_next: Vec<f32>,
    pub a_next: Vec<f32>,
    pub episode: u32,
}

#[derive(Debug, Clone, Default)]
pub struct RolloutDataset {
    pub state_dim: usize,
    pub action_dim: usize,
    pub tuples: Vec<RolloutTuple>,
}

impl RolloutDataset {
    pub fn len(&self) -> usize {
        self.tuples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tuples.is_empty()
    }

    /// Within-episode chaining: each tuple's `s_next` is the following
    /// tuple's `s_prev`.
    pub fn verify_chaining(&self) -> bool {
        self.tuples.windows(2).all(|w| {
            w[0].episode != w[1].episode || w[0].s_next == w[1].s_prev
        })
    }
}

/// Roll out `policy` in a clean env for `n_transitions` steps. Each executed
/// action picks up Gaussian noise with probability `noise_prob` to widen
/// coverage slightly beyond the policy's own tube.
pub fn collect_rollouts(
    policy: &Policy,
    env: &mut dyn Env,
    n_transitions: usize,
    noise_prob: f64,
    noise_std: f32,
    master_seed: u64,
) -> Result<RolloutDataset> {
    if n_transitions == 0 {
        return Err(Error::contract("collect_rollouts needs n_transitions >= 1"));
    }
    let mut rng = rng_for(master_seed, "collect-rollouts");
    let normal = Normal::new(0.0f32, noise_std.max(1e-12))
        .map_err(|e| Error::config(format!("bad rollout noise std: {e}")))?;

    let mut tuples = Vec::with_capacity(n_transitions);
    let mut episode: u32 = 0;
    let mut s = env.reset(episode_seed(master_seed, episode as u64));
    while tuples.len() < n_transitions {
        let mut a = policy.act(&s)?;
        if noise_prob > 0.0 && rng.random_bool(noise_prob) {
            for v in a.iter_mut() {
                *v += normal.sample(&mut rng);
            }
            policy.clip_action(&mut a);
        }
        let step = env.step(&a)?;
        let a_next = policy.act(&step.next_state)?;
        tuples.push(RolloutTuple {
            s_prev: s,
            a_prev: a,
            s_next: step.next_state.clone(),
            a_next,
            episode,
        });
        if step.done {
            episode += 1;
            s = env.reset(episode_seed(master_seed, episode as u64));
        } else {
            s = step.next_state;
        }
    }
    Ok(RolloutDataset {
        state_dim: env.spec().state_dim,
        action_dim: env.spec().action_dim,
        tuples,
    })
}

pub fn save_dataset(ds: &RolloutDataset, path: &Path, config_hash: &str) -> Result<()> {
    let mut w = ByteWriter::new();
    w.bytes(DATASET_MAGIC);
    w.u16(DATASET_VERSION);
    w.str(config_hash);
    w.str(crate::VERSION);
    w.u32(ds.state_dim as u32);
    w.u32(ds.action_dim as u32);
    w.u64(ds.tuples.len() as u64);
    for t in &ds.tuples {
        w.u32(t.episode);
        w.f32_slice(&t.s_prev);
        w.f32_slice(&t.a_prev);
        w.f32_slice(&t.s_next);
        w.f32_slice(&t.a_next);
    }
    std::fs::write(path, w.into_vec())?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<RolloutDataset> {
    let buf = std::fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingArtifact {
                what: "rollout dataset".to_string(),
                path: path.to_path_buf(),
            }
        } else {
            Error::Io(e)
        }
    })?;
    let mut r = ByteReader::new(&buf, path);
    let magic = r.take(DATASET_MAGIC.len())?;
    if magic != DATASET_MAGIC {
        return Err(r.format_err("bad magic, not a rollout dataset"));
    }
    let version = r.u16()?;
    if version != DATASET_VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            found: version,
            supported: DATASET_VERSION,
        });
    }
    let _config_hash = r.str()?;
    let _tool_version = r.str()?;
    let state_dim = r.u32()? as usize;
    let action_dim = r.u32()? as usize;
    let count = r.u64()? as usize;
    let mut tuples = Vec::with_capacity(count);
    for _ in 0..count {
        let episode = r.u32()?;
        tuples.push(RolloutTuple {
            episode,
            s_prev: r.f32_vec(state_dim)?,
            a_prev: r.f32_vec(action_dim)?,
            s_next: r.f32_vec(state_dim)?,
            a_next: r.f32_vec(action_dim)?,
        });
    }
    r.expect_end()?;
    Ok(RolloutDataset {
        state_dim,
        action_dim,
        tuples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::make_env;
    use crate::seeding::rng_for;

    fn policy_for(env: &dyn Env, seed: u64) -> Policy {
        let mut rng = rng_for(seed, "dataset-test");
        let spec = env.spec();
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
    fn noiseless_collection_chains_through_true_transitions() {
        let mut env = make_env("pendulum-swingup", &Default::default()).unwrap();
        let policy = policy_for(env.as_ref(), 61);
        let ds = collect_rollouts(&policy, env.as_mut(), 450, 0.0, 0.1, 5).unwrap();
        assert_eq!(ds.len(), 450);
        assert!(ds.verify_chaining());
        for t in &ds.tuples {
            let oracle = env.true_transition(&t.s_prev, &t.a_prev);
            assert_eq!(t.s_next, oracle);
            // a_next is the noiseless policy action on s_next.
            assert_eq!(t.a_next, policy.act(&t.s_next).unwrap());
        }
    }

    #[test]
    fn noise_rate_matches_binomial_expectation() {
        let mut env = make_env("pendulum-swingup", &Default::default()).unwrap();
        let policy = policy_for(env.as_ref(), 62);
        let n = 10_000;
        let ds = collect_rollouts(&policy, env.as_mut(), n, 0.01, 0.2, 6).unwrap();
        // A step was noised iff the executed action differs from the policy's
        // deterministic action on s_prev.
        let noised = ds
            .tuples
            .iter()
            .filter(|t| t.a_prev != policy.act(&t.s_prev).unwrap())
            .count();
        // 3 sigma around np with p = 0.01.
        let mean = 0.01 * n as f64;
        let sigma = (n as f64 * 0.01 * 0.99).sqrt();
        assert!(
            (noised as f64 - mean).abs() < 3.0 * sigma,
            "noised = {noised}, expected about {mean}"
        );
    }

    #[test]
    fn dataset_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rollouts.dat");
        let mut env = make_env("cartpole-continuous", &Default::default()).unwrap();
        let policy = policy_for(env.as_ref(), 63);
        let ds = collect_rollouts(&policy, env.as_mut(), 300, 0.01, 0.2, 7).unwrap();
        save_dataset(&ds, &path, "cafe").unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(ds.state_dim, loaded.state_dim);
        assert_eq!(ds.action_dim, loaded.action_dim);
        assert_eq!(ds.tuples, loaded.tuples);
    }
}
