//! PPO trainer with a pluggable generalization-loss hook.
//!
//! The total loss is the clipped-surrogate objective plus value and entropy
//! terms, optionally extended by `c3 * L_gen` where `L_gen = -G(policy)` and
//! `G` is a frozen predictor's estimate of the policy's generalization score
//! computed from the policy weights themselves. Gradients flow *through* the
//! predictor into the policy; the predictor's own parameters are never
//! updated, and the trainer checks that invariant by hashing them.

mod loss;
mod rollout;
mod train;

pub use loss::{clipped_surrogate, entropy, ppo_loss, LossParts, PpoLossOutput};
pub use rollout::{collect_rollout, compute_gae, RolloutBuffer};
pub use train::{train, write_checkpoint_csv, CheckpointRow, EvalSchedule, TrainResult};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::WeightSnapshot;
use crate::grid::GridError;
use crate::nn::{log_softmax, Activation, Mlp, MlpGradients, MlpTrace, NnError};

#[derive(Debug, Error)]
pub enum PpoError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("feature mask does not match the predictor input: {0}")]
    MaskMismatch(String),
    #[error("loss is not finite")]
    NonFiniteLoss,
    #[error("frozen predictor parameters changed during training")]
    FreezeViolated,
    #[error("generalization hook failed: {0}")]
    Hook(String),
    #[error(transparent)]
    Env(#[from] GridError),
    #[error(transparent)]
    Net(#[from] NnError),
}

/// Scores a policy's predicted generalization and differentiates the score
/// with respect to the policy parameters. Implementations must be frozen:
/// repeated calls on the same policy return identical values and the
/// parameter hash never changes.
pub trait GenScore: Sync {
    fn score_with_grad(&self, policy: &PolicyNet) -> Result<(f64, MlpGradients), PpoError>;
    /// Hash of the scorer's own parameters, used to verify freezing.
    fn params_hash(&self) -> u64;
}

/// The policy: three dense layers ending in a softmax over actions.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNet {
    pub net: Mlp,
}

impl PolicyNet {
    /// `obs -> hidden (tanh) -> hidden (tanh) -> actions (softmax)`.
    pub fn new(obs_dim: usize, hidden: usize, num_actions: usize, seed: u64) -> Self {
        PolicyNet {
            net: Mlp::new(
                &[obs_dim, hidden, hidden, num_actions],
                &[Activation::Tanh, Activation::Tanh, Activation::Softmax],
                seed,
            ),
        }
    }

    pub fn obs_dim(&self) -> usize {
        self.net.in_dim()
    }

    pub fn num_actions(&self) -> usize {
        self.net.out_dim()
    }

    /// Action probabilities for an observation.
    pub fn probs(&self, obs: &[f64]) -> Result<Vec<f64>, NnError> {
        self.net.forward(obs)
    }

    pub fn forward_trace(&self, obs: &[f64]) -> Result<MlpTrace, NnError> {
        self.net.forward_trace(obs)
    }

    /// Argmax action; ties resolve to the lowest index.
    pub fn greedy_action(&self, obs: &[f64]) -> Result<usize, NnError> {
        let p = self.probs(obs)?;
        let mut best = 0;
        for (i, v) in p.iter().enumerate() {
            if *v > p[best] {
                best = i;
            }
        }
        Ok(best)
    }

    /// Samples an action from the policy distribution, returning the action
    /// and its log-probability.
    pub fn sample_action(
        &self,
        obs: &[f64],
        rng: &mut crate::rng::SplitMix64,
    ) -> Result<(usize, f64), NnError> {
        let trace = self.forward_trace(obs)?;
        let p = trace.output();
        let lp = log_softmax(trace.logits());
        let u = rng.next_f64();
        let mut acc = 0.0;
        let mut action = p.len() - 1;
        for (i, prob) in p.iter().enumerate() {
            acc += prob;
            if u < acc {
                action = i;
                break;
            }
        }
        Ok((action, lp[action]))
    }

    /// Extracts the weight matrices (biases excluded) in snapshot
    /// orientation, input x output.
    pub fn snapshot(&self, agent_id: impl Into<String>) -> WeightSnapshot {
        WeightSnapshot::new(
            self.net.layers.iter().map(|l| l.w.transposed()).collect(),
            agent_id,
        )
    }
}

/// The value function: same trunk shape with a scalar identity head.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueNet {
    pub net: Mlp,
}

impl ValueNet {
    pub fn new(obs_dim: usize, hidden: usize, seed: u64) -> Self {
        ValueNet {
            net: Mlp::new(
                &[obs_dim, hidden, hidden, 1],
                &[Activation::Tanh, Activation::Tanh, Activation::Identity],
                seed,
            ),
        }
    }

    pub fn value(&self, obs: &[f64]) -> Result<f64, NnError> {
        Ok(self.net.forward(obs)?[0])
    }
}

/// PPO hyperparameters. `c3` scales the generalization term; with `c3 = 0`
/// (or no hook) the loss is exactly standard PPO.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpoConfig {
    pub gamma: f64,
    pub lam: f64,
    pub clip_eps: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub lr: f64,
    pub n_steps: usize,
    pub minibatch_size: usize,
    pub n_epochs: usize,
    pub value_clip: bool,
    pub normalize_advantage: bool,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            gamma: 0.99,
            lam: 0.95,
            clip_eps: 0.2,
            c1: 0.5,
            c2: 0.01,
            c3: 0.5,
            lr: 3e-4,
            n_steps: 2048,
            minibatch_size: 64,
            n_epochs: 10,
            value_clip: true,
            normalize_advantage: true,
            hidden: 64,
            seed: 0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), PpoError> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(PpoError::InvalidConfig(format!("gamma {} not in [0,1)", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.lam) {
            return Err(PpoError::InvalidConfig(format!("lambda {} not in [0,1]", self.lam)));
        }
        if self.clip_eps <= 0.0 {
            return Err(PpoError::InvalidConfig("clip_eps must be > 0".into()));
        }
        if self.c3 < 0.0 {
            return Err(PpoError::InvalidConfig("c3 must be >= 0".into()));
        }
        if self.n_steps == 0 || self.minibatch_size == 0 || self.n_epochs == 0 {
            return Err(PpoError::InvalidConfig("n_steps, minibatch, epochs must be > 0".into()));
        }
        Ok(())
    }
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    #[test]
    fn policy_outputs_distribution() {
        let policy = PolicyNet::new(6, 4, 3, 1);
        let p = policy.probs(&[0.1; 6]).unwrap();
        assert_eq!(p.len(), 3);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn greedy_action_is_argmax() {
        let policy = PolicyNet::new(6, 4, 3, 1);
        let obs = [0.3, -0.1, 0.7, 0.0, 0.2, -0.5];
        let p = policy.probs(&obs).unwrap();
        let a = policy.greedy_action(&obs).unwrap();
        assert!(p.iter().all(|v| *v <= p[a]));
    }

    #[test]
    fn sampled_actions_follow_seeded_stream() {
        let policy = PolicyNet::new(6, 4, 3, 1);
        let obs = [0.1; 6];
        let mut r1 = SplitMix64::new(5);
        let mut r2 = SplitMix64::new(5);
        for _ in 0..20 {
            let (a1, lp1) = policy.sample_action(&obs, &mut r1).unwrap();
            let (a2, lp2) = policy.sample_action(&obs, &mut r2).unwrap();
            assert_eq!(a1, a2);
            assert_eq!(lp1.to_bits(), lp2.to_bits());
            assert!(lp1 <= 0.0);
        }
    }

    #[test]
    fn snapshot_has_input_major_orientation() {
        let policy = PolicyNet::new(6, 4, 3, 1);
        let snap = policy.snapshot("a");
        assert_eq!(snap.layers[0].rows(), 6);
        assert_eq!(snap.layers[0].cols(), 4);
        assert_eq!(snap.layers[2].rows(), 4);
        assert_eq!(snap.layers[2].cols(), 3);
        assert_eq!(snap.layers[0].get(2, 1), policy.net.layers[0].w.get(1, 2));
    }

    #[test]
    fn canonical_policy_snapshot_is_canonical() {
        let policy = PolicyNet::new(147, 64, 7, 0);
        policy.snapshot("x").validate_canonical().unwrap();
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let mut cfg = PpoConfig::default();
        cfg.validate().unwrap();
        cfg.gamma = 1.0;
        assert!(cfg.validate().is_err());
        cfg = PpoConfig { c3: -0.1, ..PpoConfig::default() };
        assert!(cfg.validate().is_err());
    }
}
