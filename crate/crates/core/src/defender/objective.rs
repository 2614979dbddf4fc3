//! Training objectives for the dynamics model, behind a common trait so the
//! single- and dual-objective variants stay interchangeable.
//!
//! Single: fit the next state only. Dual: additionally pull the prediction
//! toward states on which the frozen victim policy repeats its recorded
//! action; gradients flow through the policy but never update it.

use rand::seq::SliceRandom;

use super::{DynamicsModel, NormStats, ObjectiveMode, RolloutDataset};
use crate::agent::Policy;
use crate::diffnum::{
    adam_step, l2_distance, AdamHyper, AdamState, Activation, GradTape, Mlp, NodeId, Tensor,
};
use crate::error::{Error, Result};
use crate::seeding::{rng_for, rng_for_indexed};

pub trait TrainingObjective: Send + Sync {
    fn name(&self) -> &'static str;
    fn mode(&self) -> ObjectiveMode;
    fn lambda(&self) -> f32;
    /// Scalar training loss for one batch. `pred_raw` is the denormalized
    /// prediction node; targets are the raw next states and recorded actions.
    fn batch_loss(
        &self,
        tape: &mut GradTape,
        pred_raw: NodeId,
        s_next: &Tensor,
        a_next: &Tensor,
    ) -> Result<NodeId>;
}

pub struct SingleObjective;

impl TrainingObjective for SingleObjective {
    fn name(&self) -> &'static str {
        "single"
    }

    fn mode(&self) -> ObjectiveMode {
        ObjectiveMode::Single
    }

    fn lambda(&self) -> f32 {
        0.0
    }

    fn batch_loss(
        &self,
        tape: &mut GradTape,
        pred_raw: NodeId,
        s_next: &Tensor,
        _a_next: &Tensor,
    ) -> Result<NodeId> {
        let target = tape.constant(s_next.clone());
        let diff = tape.sub(pred_raw, target)?;
        Ok(tape.mean_row_l2(diff))
    }
}

pub struct DualObjective {
    pub policy: Policy,
    pub lambda: f32,
}

impl TrainingObjective for DualObjective {
    fn name(&self) -> &'static str {
        "dual"
    }

    fn mode(&self) -> ObjectiveMode {
        ObjectiveMode::Dual
    }

    fn lambda(&self) -> f32 {
        self.lambda
    }

    fn batch_loss(
        &self,
        tape: &mut GradTape,
        pred_raw: NodeId,
        s_next: &Tensor,
        a_next: &Tensor,
    ) -> Result<NodeId> {
        let target = tape.constant(s_next.clone());
        let diff = tape.sub(pred_raw, target)?;
        let state_loss = tape.mean_row_l2(diff);

        // Action consistency is measured on the actor's tanh scale (actions
        // mapped back to [-1, 1] per dim); otherwise wide action boxes let
        // this term swamp the state term and lambda = 1 loses its meaning.
        let tanh_out = self.policy.actor.forward_taped(tape, pred_raw)?;
        let center = self.policy.action_center();
        let half = self.policy.action_half_range();
        let mut normalized = a_next.clone();
        let adim = half.len();
        for (i, v) in normalized.data_mut().iter_mut().enumerate() {
            *v = (*v - center[i % adim]) / half[i % adim];
        }
        let a_target = tape.constant(normalized);
        let adiff = tape.sub(tanh_out, a_target)?;
        let action_loss = tape.mean_row_l2(adiff);
        let scaled = tape.scale(action_loss, self.lambda);
        tape.add(state_loss, scaled)
    }
}

#[derive(Debug, Clone)]
pub struct DefenderTrainConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub holdout_fraction: f64,
}

impl Default for DefenderTrainConfig {
    fn default() -> Self {
        DefenderTrainConfig {
            hidden: vec![256, 256],
            epochs: 100,
            batch_size: 256,
            lr: 1e-3,
            holdout_fraction: 0.1,
        }
    }
}

pub struct TrainedDefender {
    pub model: DynamicsModel,
    /// Dataset indices held out from training (calibration / evaluation).
    pub holdout: Vec<usize>,
    pub final_train_loss: f32,
}

/// Deterministic train/holdout split; the same seed yields the same split for
/// every objective, which keeps single-vs-dual comparisons controlled.
fn split_indices(n: usize, holdout_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = rng_for(seed, "defender-split");
    idx.shuffle(&mut rng);
    let cut = ((n as f64) * holdout_fraction).floor() as usize;
    let holdout = idx[..cut].to_vec();
    let train = idx[cut..].to_vec();
    (train, holdout)
}

/// Train a dynamics model under the given objective.
pub fn train_with_objective(
    dataset: &RolloutDataset,
    objective: &dyn TrainingObjective,
    cfg: &DefenderTrainConfig,
    seed: u64,
) -> Result<TrainedDefender> {
    if dataset.is_empty() {
        return Err(Error::contract("cannot train a defender on an empty dataset"));
    }
    let (train_idx, holdout) = split_indices(dataset.len(), cfg.holdout_fraction, seed);
    if train_idx.is_empty() {
        return Err(Error::contract("holdout fraction leaves no training data"));
    }
    let train_tuples: Vec<&super::RolloutTuple> =
        train_idx.iter().map(|&i| &dataset.tuples[i]).collect();
    let norm = NormStats::from_tuples(&train_tuples, dataset.state_dim, dataset.action_dim);

    let mut dims = vec![dataset.state_dim + dataset.action_dim];
    dims.extend_from_slice(&cfg.hidden);
    dims.push(dataset.state_dim);
    let mut init_rng = rng_for(seed, "defender-init");
    let mut net = Mlp::new(dims, Activation::Tanh, Activation::Identity, &mut init_rng)?;
    let mut adam = AdamState::new(&net);
    let hyper = AdamHyper::with_lr(cfg.lr);

    let sdim = dataset.state_dim;
    let adim = dataset.action_dim;
    let mut order = train_idx.clone();
    let mut last_epoch_loss = 0.0f32;
    for epoch in 0..cfg.epochs {
        let mut rng = rng_for_indexed(seed, "defender-epoch", epoch as u64);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let b = chunk.len();
            let mut x = Vec::with_capacity(b * (sdim + adim));
            let mut s_next = Vec::with_capacity(b * sdim);
            let mut a_next = Vec::with_capacity(b * adim);
            for &i in chunk {
                let t = &dataset.tuples[i];
                norm.normalize_input(&t.s_prev, &t.a_prev, &mut x);
                s_next.extend_from_slice(&t.s_next);
                a_next.extend_from_slice(&t.a_next);
            }
            let x = Tensor::matrix(b, sdim + adim, x)?;
            let s_next = Tensor::matrix(b, sdim, s_next)?;
            let a_next = Tensor::matrix(b, adim, a_next)?;

            let mut tape = GradTape::new();
            let x_node = tape.constant(x);
            let pred_norm = net.forward_taped(&mut tape, x_node)?;
            let pred_raw = tape.col_affine(pred_norm, &norm.state_std, &norm.state_mean)?;
            let loss = objective.batch_loss(&mut tape, pred_raw, &s_next, &a_next)?;
            epoch_loss += tape.value(loss).data()[0] as f64;
            batches += 1;
            let grads = tape.gradient(loss, &[&net])?;
            adam_step(&mut net, &grads, &mut adam, &hyper)?;
        }
        last_epoch_loss = (epoch_loss / batches.max(1) as f64) as f32;
    }

    Ok(TrainedDefender {
        model: DynamicsModel {
            net,
            mode: objective.mode(),
            lambda: objective.lambda(),
            norm,
        },
        holdout,
        final_train_loss: last_epoch_loss,
    })
}

/// Spec-level entry point: pick the objective by mode. Dual mode requires the
/// frozen victim policy.
pub fn train_defender(
    dataset: &RolloutDataset,
    mode: ObjectiveMode,
    lambda: f32,
    policy: Option<&Policy>,
    cfg: &DefenderTrainConfig,
    seed: u64,
) -> Result<TrainedDefender> {
    match mode {
        ObjectiveMode::Single => train_with_objective(dataset, &SingleObjective, cfg, seed),
        ObjectiveMode::Dual => {
            let policy = policy.ok_or_else(|| {
                Error::contract("dual-objective training requires the frozen victim policy")
            })?;
            let objective = DualObjective {
                policy: policy.clone(),
                lambda,
            };
            train_with_objective(dataset, &objective, cfg, seed)
        }
    }
}

/// Mean one-step state loss and action loss over the given dataset indices:
/// `||s' - T(s,a)||` and `||pi(s') - pi(T(s,a))||` with `pi(s')` read from the
/// recorded tuples.
pub fn holdout_losses(
    model: &DynamicsModel,
    dataset: &RolloutDataset,
    indices: &[usize],
    policy: &Policy,
) -> Result<(f32, f32)> {
    if indices.is_empty() {
        return Err(Error::contract("holdout_losses needs at least one tuple"));
    }
    let mut state_sum = 0.0f64;
    let mut action_sum = 0.0f64;
    for &i in indices {
        let t = &dataset.tuples[i];
        let pred = model.predict(&t.s_prev, &t.a_prev)?;
        state_sum += l2_distance(&pred, &t.s_next) as f64;
        let a_pred = policy.act(&pred)?;
        action_sum += l2_distance(&a_pred, &t.a_next) as f64;
    }
    let n = indices.len() as f64;
    Ok(((state_sum / n) as f32, (action_sum / n) as f32))
}
