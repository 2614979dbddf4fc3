//! The dynamics-model defender: learned one-step transition models in single-
//! and dual-objective flavors, residual-threshold detection, threshold
//! calibration, and the recovery guard that replaces flagged observations with
//! predictions.

pub mod dataset;
pub mod detector;
pub mod objective;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffnum::checkpoint::{read_mlp_section, write_mlp_section, ByteReader, ByteWriter};
use crate::diffnum::{l2_distance, Mlp, Tensor};
use crate::error::{Error, Result};

pub use dataset::{collect_rollouts, load_dataset, save_dataset, RolloutDataset, RolloutTuple};
pub use detector::{make_detector, ActionL2Detector, Detector, StateL2Detector};
pub use objective::{
    holdout_losses, train_defender, train_with_objective, DefenderTrainConfig, DualObjective,
    SingleObjective, TrainedDefender, TrainingObjective,
};

pub const DEFENDER_MAGIC: &[u8; 6] = b"RTSDEF";
pub const DEFENDER_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveMode {
    Single,
    Dual,
}

impl ObjectiveMode {
    pub fn name(self) -> &'static str {
        match self {
            ObjectiveMode::Single => "single",
            ObjectiveMode::Dual => "dual",
        }
    }
}

/// Per-dim input/output normalization statistics, frozen at training time.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub state_mean: Vec<f32>,
    pub state_std: Vec<f32>,
    pub action_mean: Vec<f32>,
    pub action_std: Vec<f32>,
}

impl NormStats {
    pub fn from_tuples(tuples: &[&RolloutTuple], state_dim: usize, action_dim: usize) -> Self {
        let n = tuples.len().max(1) as f64;
        let mut sm = vec![0.0f64; state_dim];
        let mut ss = vec![0.0f64; state_dim];
        let mut am = vec![0.0f64; action_dim];
        let mut asq = vec![0.0f64; action_dim];
        for t in tuples {
            for (i, v) in t.s_prev.iter().enumerate() {
                sm[i] += *v as f64;
                ss[i] += (*v as f64) * (*v as f64);
            }
            for (i, v) in t.a_prev.iter().enumerate() {
                am[i] += *v as f64;
                asq[i] += (*v as f64) * (*v as f64);
            }
        }
        let finish = |sum: &[f64], sumsq: &[f64]| -> (Vec<f32>, Vec<f32>) {
            sum.iter()
                .zip(sumsq)
                .map(|(s, sq)| {
                    let mean = s / n;
                    let var = (sq / n - mean * mean).max(0.0);
                    (mean as f32, (var.sqrt() as f32).max(1e-6))
                })
                .unzip()
        };
        let (state_mean, state_std) = finish(&sm, &ss);
        let (action_mean, action_std) = finish(&am, &asq);
        NormStats {
            state_mean,
            state_std,
            action_mean,
            action_std,
        }
    }

    pub fn normalize_input(&self, s: &[f32], a: &[f32], out: &mut Vec<f32>) {
        for (i, v) in s.iter().enumerate() {
            out.push((v - self.state_mean[i]) / self.state_std[i]);
        }
        for (i, v) in a.iter().enumerate() {
            out.push((v - self.action_mean[i]) / self.action_std[i]);
        }
    }
}

/// Learned one-step transition model `T(s, a) -> s'`. The network operates in
/// normalized units; predictions are denormalized to raw state units so both
/// detection residuals and the threshold H stay interpretable.
#[derive(Debug, Clone)]
pub struct DynamicsModel {
    pub net: Mlp,
    pub mode: ObjectiveMode,
    pub lambda: f32,
    pub norm: NormStats,
}

impl DynamicsModel {
    pub fn state_dim(&self) -> usize {
        self.net.output_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.net.input_dim() - self.net.output_dim()
    }

    /// Deterministic one-step prediction in raw state units.
    pub fn predict(&self, s: &[f32], a: &[f32]) -> Result<Vec<f32>> {
        if s.len() != self.state_dim() || a.len() != self.action_dim() {
            return Err(Error::dims(
                "predict",
                format!("state {} action {}", self.state_dim(), self.action_dim()),
                format!("state {} action {}", s.len(), a.len()),
            ));
        }
        let mut x = Vec::with_capacity(s.len() + a.len());
        self.norm.normalize_input(s, a, &mut x);
        let mut out = self.net.forward_vec(&x)?;
        for (i, v) in out.iter_mut().enumerate() {
            *v = self.norm.state_mean[i] + self.norm.state_std[i] * *v;
        }
        Ok(out)
    }

    /// Batched prediction, rows are (s, a) pairs.
    pub fn predict_batch(&self, s: &Tensor, a: &Tensor) -> Result<Tensor> {
        let b = s.rows();
        let mut x = Vec::with_capacity(b * (self.state_dim() + self.action_dim()));
        for r in 0..b {
            self.norm.normalize_input(s.row(r), a.row(r), &mut x);
        }
        let x = Tensor::matrix(b, self.state_dim() + self.action_dim(), x)?;
        let mut out = self.net.forward(&x)?;
        let d = self.state_dim();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let j = i % d;
            *v = self.norm.state_mean[j] + self.norm.state_std[j] * *v;
        }
        Ok(out)
    }
}

/// Residual-threshold detection: flag when the distance between the model's
/// prediction and the incoming observation exceeds H. Pure function.
pub fn detect(
    model: &DynamicsModel,
    s_prev: &[f32],
    a_prev: &[f32],
    s_incoming: &[f32],
    h: f32,
) -> Result<(bool, f32)> {
    let pred = model.predict(s_prev, a_prev)?;
    let residual = l2_distance(&pred, s_incoming);
    Ok((residual > h, residual))
}

/// H = the given quantile of clean one-step residuals, computed with the
/// supplied detection metric on data disjoint from training.
pub fn calibrate_threshold(
    model: &DynamicsModel,
    holdout: &[&RolloutTuple],
    quantile: f64,
    metric: &dyn detector::Detector,
) -> Result<f32> {
    if holdout.is_empty() {
        return Err(Error::contract("cannot calibrate H on an empty dataset"));
    }
    if !(quantile > 0.5 && quantile <= 1.0) {
        return Err(Error::config(format!(
            "calibration quantile must be in (0.5, 1.0], got {quantile}"
        )));
    }
    if holdout.len() < 1000 {
        eprintln!(
            "warning: calibrating H on only {} residuals; quantile estimate will be coarse",
            holdout.len()
        );
    }
    let mut residuals = Vec::with_capacity(holdout.len());
    for t in holdout {
        let pred = model.predict(&t.s_prev, &t.a_prev)?;
        residuals.push(metric.residual(&pred, &t.s_next)?);
    }
    residuals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let idx = ((quantile * residuals.len() as f64).ceil() as usize).clamp(1, residuals.len()) - 1;
    Ok(residuals[idx])
}

#[derive(Debug, Clone)]
pub struct GuardOutcome {
    pub chosen: Vec<f32>,
    pub predicted: Vec<f32>,
    pub residual: f32,
    pub flagged: bool,
}

/// One recovery step: predict from the state the agent last acted on and the
/// action it took; pass the incoming observation through when the residual is
/// under H, otherwise substitute the prediction. Under consecutive attacks the
/// prediction chains through previously recovered states.
pub fn guard_step(
    model: &DynamicsModel,
    h: f32,
    s_prev_chosen: &[f32],
    a_prev: &[f32],
    s_incoming: &[f32],
    metric: &dyn detector::Detector,
) -> Result<GuardOutcome> {
    let predicted = model.predict(s_prev_chosen, a_prev)?;
    let residual = metric.residual(&predicted, s_incoming)?;
    let flagged = residual > h;
    Ok(GuardOutcome {
        chosen: if flagged {
            predicted.clone()
        } else {
            s_incoming.to_vec()
        },
        predicted,
        residual,
        flagged,
    })
}

/// Defender checkpoint: mode, lambda, H, normalization stats, and the network.
pub fn save_defender(
    model: &DynamicsModel,
    h: f32,
    path: &Path,
    config_hash: &str,
) -> Result<()> {
    let mut w = ByteWriter::new();
    w.bytes(DEFENDER_MAGIC);
    w.u16(DEFENDER_VERSION);
    w.str(config_hash);
    w.str(crate::VERSION);
    w.bytes(&[match model.mode {
        ObjectiveMode::Single => 0u8,
        ObjectiveMode::Dual => 1u8,
    }]);
    w.f32(model.lambda);
    w.f32(h);
    w.u32(model.state_dim() as u32);
    w.u32(model.action_dim() as u32);
    w.f32_slice(&model.norm.state_mean);
    w.f32_slice(&model.norm.state_std);
    w.f32_slice(&model.norm.action_mean);
    w.f32_slice(&model.norm.action_std);
    write_mlp_section(&mut w, &model.net);
    std::fs::write(path, w.into_vec())?;
    Ok(())
}

pub fn load_defender(path: &Path) -> Result<(DynamicsModel, f32)> {
    let buf = std::fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingArtifact {
                what: "defender checkpoint".to_string(),
                path: path.to_path_buf(),
            }
        } else {
            Error::Io(e)
        }
    })?;
    let mut r = ByteReader::new(&buf, path);
    let magic = r.take(DEFENDER_MAGIC.len())?;
    if magic != DEFENDER_MAGIC {
        return Err(r.format_err("bad magic, not a defender checkpoint"));
    }
    let version = r.u16()?;
    if version != DEFENDER_VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            found: version,
            supported: DEFENDER_VERSION,
        });
    }
    let _config_hash = r.str()?;
    let _tool_version = r.str()?;
    let mode = match r.take(1)?[0] {
        0 => ObjectiveMode::Single,
        1 => ObjectiveMode::Dual,
        other => return Err(r.format_err(format!("bad objective tag {other}"))),
    };
    let lambda = r.f32()?;
    let h = r.f32()?;
    let sdim = r.u32()? as usize;
    let adim = r.u32()? as usize;
    let norm = NormStats {
        state_mean: r.f32_vec(sdim)?,
        state_std: r.f32_vec(sdim)?,
        action_mean: r.f32_vec(adim)?,
        action_std: r.f32_vec(adim)?,
    };
    let net = read_mlp_section(&mut r)?;
    r.expect_end()?;
    if net.input_dim() != sdim + adim || net.output_dim() != sdim {
        return Err(r.format_err("defender net shape disagrees with recorded dims"));
    }
    Ok((
        DynamicsModel {
            net,
            mode,
            lambda,
            norm,
        },
        h,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnum::Activation;
    use crate::seeding::rng_for;

    fn toy_model(seed: u64) -> DynamicsModel {
        let mut rng = rng_for(seed, "defender-toy");
        let net = Mlp::new(vec![4, 8, 3], Activation::Tanh, Activation::Identity, &mut rng).unwrap();
        DynamicsModel {
            net,
            mode: ObjectiveMode::Single,
            lambda: 0.0,
            norm: NormStats {
                state_mean: vec![0.0; 3],
                state_std: vec![1.0; 3],
                action_mean: vec![0.0],
                action_std: vec![1.0],
            },
        }
    }

    #[test]
    fn prediction_is_deterministic_and_finite() {
        let m = toy_model(71);
        let s = [0.1, -0.4, 1.0];
        let a = [0.2];
        let p1 = m.predict(&s, &a).unwrap();
        let p2 = m.predict(&s, &a).unwrap();
        assert_eq!(p1, p2);
        assert!(p1.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn exact_prediction_has_zero_residual_and_no_flag() {
        let m = toy_model(72);
        let s = [0.3, 0.1, -0.2];
        let a = [0.5];
        let pred = m.predict(&s, &a).unwrap();
        let (flagged, residual) = detect(&m, &s, &a, &pred, 0.5).unwrap();
        assert_eq!(residual, 0.0);
        assert!(!flagged);
    }

    #[test]
    fn quantile_one_is_the_max_residual() {
        let m = toy_model(73);
        let tuples: Vec<RolloutTuple> = (0..50)
            .map(|i| RolloutTuple {
                s_prev: vec![i as f32 * 0.01, 0.0, 0.0],
                a_prev: vec![0.1],
                s_next: vec![i as f32 * 0.01, 0.0, 0.0],
                a_next: vec![0.1],
                episode: 0,
            })
            .collect();
        let refs: Vec<&RolloutTuple> = tuples.iter().collect();
        let metric = StateL2Detector;
        let h = calibrate_threshold(&m, &refs, 1.0, &metric).unwrap();
        let max = refs
            .iter()
            .map(|t| {
                let p = m.predict(&t.s_prev, &t.a_prev).unwrap();
                l2_distance(&p, &t.s_next)
            })
            .fold(0.0f32, f32::max);
        assert_eq!(h, max);
        // Zero false positives on the calibration set itself.
        for t in &refs {
            let (flagged, _) = detect(&m, &t.s_prev, &t.a_prev, &t.s_next, h).unwrap();
            assert!(!flagged);
        }
    }

    #[test]
    fn quantile_order_statistics_count() {
        let m = toy_model(74);
        let tuples: Vec<RolloutTuple> = (0..10_000)
            .map(|i| RolloutTuple {
                s_prev: vec![(i % 100) as f32 * 0.001, 0.0, 0.0],
                a_prev: vec![((i / 100) as f32) * 0.001],
                s_next: vec![0.0, 0.0, 0.0],
                a_next: vec![0.0],
                episode: 0,
            })
            .collect();
        let refs: Vec<&RolloutTuple> = tuples.iter().collect();
        let h = calibrate_threshold(&m, &refs, 0.999, &StateL2Detector).unwrap();
        let above = refs
            .iter()
            .filter(|t| {
                let p = m.predict(&t.s_prev, &t.a_prev).unwrap();
                l2_distance(&p, &t.s_next) > h
            })
            .count();
        assert!(above <= 10, "{above} residuals above the 0.999 quantile");
    }

    #[test]
    fn h_is_monotone_in_the_quantile() {
        let m = toy_model(75);
        let tuples: Vec<RolloutTuple> = (0..2000)
            .map(|i| RolloutTuple {
                s_prev: vec![(i as f32).sin() * 0.1, 0.0, 0.0],
                a_prev: vec![(i as f32).cos() * 0.1],
                s_next: vec![0.0; 3],
                a_next: vec![0.0],
                episode: 0,
            })
            .collect();
        let refs: Vec<&RolloutTuple> = tuples.iter().collect();
        let mut prev = 0.0f32;
        for q in [0.6, 0.9, 0.99, 0.999, 1.0] {
            let h = calibrate_threshold(&m, &refs, q, &StateL2Detector).unwrap();
            assert!(h >= prev, "H not monotone at q={q}");
            prev = h;
        }
    }

    #[test]
    fn guard_passes_clean_and_recovers_flagged() {
        let m = toy_model(76);
        let s_prev = [0.2, 0.0, -0.1];
        let a = [0.3];
        let pred = m.predict(&s_prev, &a).unwrap();

        // Incoming close to the prediction: passed through untouched.
        let clean = pred.clone();
        let out = guard_step(&m, 0.5, &s_prev, &a, &clean, &StateL2Detector).unwrap();
        assert!(!out.flagged);
        assert_eq!(out.chosen, clean);

        // Incoming far away: replaced by the prediction.
        let triggered = vec![50.0, 0.0, 0.0];
        let out = guard_step(&m, 0.5, &s_prev, &a, &triggered, &StateL2Detector).unwrap();
        assert!(out.flagged);
        assert_eq!(out.chosen, pred);
    }

    #[test]
    fn consecutive_recoveries_chain_through_predictions() {
        let m = toy_model(77);
        let s0 = [0.1, 0.1, 0.1];
        let a0 = [0.0];
        let far = vec![99.0, 0.0, 0.0];
        let first = guard_step(&m, 0.1, &s0, &a0, &far, &StateL2Detector).unwrap();
        assert!(first.flagged);
        // Second flagged step must predict from the first prediction.
        let a1 = [0.2];
        let second = guard_step(&m, 0.1, &first.chosen, &a1, &far, &StateL2Detector).unwrap();
        assert!(second.flagged);
        let expect = m.predict(&first.predicted, &a1).unwrap();
        assert_eq!(second.chosen, expect);
    }

    #[test]
    fn defender_checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("defender.ckpt");
        let m = toy_model(78);
        save_defender(&m, 0.123, &path, "beef").unwrap();
        let (loaded, h) = load_defender(&path).unwrap();
        assert!(m.net.params_equal(&loaded.net));
        assert_eq!(m.norm, loaded.norm);
        assert_eq!(h, 0.123);
        assert_eq!(loaded.mode, ObjectiveMode::Single);
    }
}
