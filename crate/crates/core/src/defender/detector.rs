//! Detection metrics behind a common trait, selected by name from config.
//!
//! The default compares predicted and incoming states directly in L2. The
//! secondary metric compares the policy's actions on the two states instead,
//! which is the right notion when raw states are hard to compare.

use crate::agent::Policy;
use crate::diffnum::l2_distance;
use crate::error::{Error, Result};

pub trait Detector: Send + Sync {
    fn name(&self) -> &'static str;
    /// Residual between the model's predicted state and the incoming one.
    fn residual(&self, predicted: &[f32], incoming: &[f32]) -> Result<f32>;
}

/// `||predicted - incoming||_2` in raw state units.
pub struct StateL2Detector;

impl Detector for StateL2Detector {
    fn name(&self) -> &'static str {
        "state-l2"
    }

    fn residual(&self, predicted: &[f32], incoming: &[f32]) -> Result<f32> {
        if predicted.len() != incoming.len() {
            return Err(Error::dims("state-l2 residual", predicted.len(), incoming.len()));
        }
        Ok(l2_distance(predicted, incoming))
    }
}

/// `||pi(predicted) - pi(incoming)||_2`: distance between the actions the
/// victim policy would take on the two states.
pub struct ActionL2Detector {
    policy: Policy,
}

impl ActionL2Detector {
    pub fn new(policy: Policy) -> Self {
        ActionL2Detector { policy }
    }
}

impl Detector for ActionL2Detector {
    fn name(&self) -> &'static str {
        "action-l2"
    }

    fn residual(&self, predicted: &[f32], incoming: &[f32]) -> Result<f32> {
        let a_pred = self.policy.act(predicted)?;
        let a_in = self.policy.act(incoming)?;
        Ok(l2_distance(&a_pred, &a_in))
    }
}

pub const DETECTOR_NAMES: &[&str] = &["state-l2", "action-l2"];

/// Construct a detection metric by registry name.
pub fn make_detector(name: &str, policy: &Policy) -> Result<Box<dyn Detector>> {
    match name {
        "state-l2" => Ok(Box::new(StateL2Detector)),
        "action-l2" => Ok(Box::new(ActionL2Detector::new(policy.clone()))),
        other => Err(Error::config(format!(
            "unknown detector '{other}', available: {DETECTOR_NAMES:?}"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::rng_for;

    fn policy() -> Policy {
        let mut rng = rng_for(81, "detector");
        Policy::new(3, 1, &[8], 0.99, 0.005, vec![-1.0], vec![1.0], &mut rng).unwrap()
    }

    #[test]
    fn state_metric_is_plain_l2() {
        let d = StateL2Detector;
        assert_eq!(d.residual(&[0.0, 3.0], &[4.0, 0.0]).unwrap(), 5.0);
    }

    #[test]
    fn action_metric_vanishes_on_identical_states() {
        let p = policy();
        let d = ActionL2Detector::new(p);
        let s = [0.2, -0.3, 0.9];
        assert_eq!(d.residual(&s, &s).unwrap(), 0.0);
    }

    #[test]
    fn registry_resolves_both_names_and_rejects_unknown() {
        let p = policy();
        assert_eq!(make_detector("state-l2", &p).unwrap().name(), "state-l2");
        assert_eq!(make_detector("action-l2", &p).unwrap().name(), "action-l2");
        assert!(matches!(
            make_detector("mahalanobis", &p),
            Err(Error::Config(_))
        ));
    }
}
