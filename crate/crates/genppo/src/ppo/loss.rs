//! The PPO loss with optional generalization term, and its exact gradients.
//!
//! Total loss over a minibatch:
//!
//! ```text
//! L = -E[min(r A, clip(r, 1-eps, 1+eps) A)]
//!     + c1 * E[max((V - R)^2, (V_clip - R)^2)]   (unclipped if disabled)
//!     + c2 * (-E[H(pi(.|s))])
//!     + c3 * (-G(policy))
//! ```
//!
//! Policy gradients are assembled in logit space: for the surrogate the
//! chain is `d log pi(a) / d z_j = 1{j=a} - p_j`, for the entropy term
//! `d(-H)/d z_j = p_j (log p_j + H)`. The generalization term's gradient
//! comes from the hook and flows only into the policy weights.

use crate::nn::{log_softmax, MlpGradients};

use super::{GenScore, PolicyNet, PpoConfig, PpoError, RolloutBuffer, ValueNet};

/// Loss components before their coefficients: `total = clip + c1*vf +
/// c2*ent + c3*gen`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub clip: f64,
    pub vf: f64,
    pub ent: f64,
    pub gen: f64,
}

#[derive(Debug, Clone)]
pub struct PpoLossOutput {
    pub parts: LossParts,
    pub policy_grads: MlpGradients,
    pub value_grads: MlpGradients,
}

/// Per-sample clipped surrogate `min(r A, clip(r) A)`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, clip_eps: f64) -> f64 {
    let s1 = ratio * advantage;
    let s2 = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps) * advantage;
    s1.min(s2)
}

/// Entropy of a categorical distribution given probabilities and their logs.
pub fn entropy(probs: &[f64], log_probs: &[f64]) -> f64 {
    -probs.iter().zip(log_probs).map(|(p, lp)| p * lp).sum::<f64>()
}

/// Evaluates the loss and its gradients over the minibatch rows `indices` of
/// `buffer`. The hook is consulted once per minibatch on the current policy;
/// it is skipped entirely when absent or when `c3 == 0`, which makes the
/// standard path bit-identical to plain PPO.
pub fn ppo_loss(
    policy: &PolicyNet,
    value: &ValueNet,
    buffer: &RolloutBuffer,
    indices: &[usize],
    cfg: &PpoConfig,
    hook: Option<&dyn GenScore>,
) -> Result<PpoLossOutput, PpoError> {
    assert!(!indices.is_empty(), "minibatch must be nonempty");
    assert_eq!(buffer.len(), buffer.advantages.len(), "advantages not computed");
    let n = indices.len() as f64;

    // Advantage normalization is per minibatch.
    let advantages: Vec<f64> = {
        let raw: Vec<f64> = indices.iter().map(|i| buffer.advantages[*i]).collect();
        if cfg.normalize_advantage && raw.len() > 1 {
            let mean = raw.iter().sum::<f64>() / n;
            let var = raw.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
            let std = var.sqrt() + 1e-8;
            raw.iter().map(|a| (a - mean) / std).collect()
        } else {
            raw
        }
    };

    let mut policy_grads = MlpGradients::zeros_like(&policy.net);
    let mut value_grads = MlpGradients::zeros_like(&value.net);
    let mut clip_sum = 0.0;
    let mut vf_sum = 0.0;
    let mut ent_sum = 0.0;

    for (slot, &i) in indices.iter().enumerate() {
        let obs = &buffer.obs[i];
        let action = buffer.actions[i];
        let adv = advantages[slot];

        // Policy terms.
        let trace = policy.forward_trace(obs)?;
        let probs = trace.output().to_vec();
        let log_probs = log_softmax(trace.logits());
        let ratio = (log_probs[action] - buffer.log_probs_old[i]).exp();

        let s1 = ratio * adv;
        let s2 = ratio.clamp(1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps) * adv;
        let (surr, d_surr_d_logpi) = if s1 <= s2 { (s1, ratio * adv) } else { (s2, 0.0) };
        clip_sum += surr;

        let h = entropy(&probs, &log_probs);
        ent_sum += h;

        let mut d_logits = vec![0.0; probs.len()];
        for j in 0..probs.len() {
            let onehot = if j == action { 1.0 } else { 0.0 };
            let d_surr = d_surr_d_logpi * (onehot - probs[j]);
            let d_neg_ent = probs[j] * (log_probs[j] + h);
            d_logits[j] = (-d_surr + cfg.c2 * d_neg_ent) / n;
        }
        let (grads, _) = policy.net.backward_from_logits(&trace, &d_logits);
        policy_grads.add_scaled(&grads, 1.0);

        // Value term.
        let v_trace = value.net.forward_trace(obs)?;
        let v = v_trace.output()[0];
        let target = buffer.returns[i];
        let (term, dv) = if cfg.value_clip {
            let v_old = buffer.values_old[i];
            let v_clip = v_old + (v - v_old).clamp(-cfg.clip_eps, cfg.clip_eps);
            let e1 = (v - target) * (v - target);
            let e2 = (v_clip - target) * (v_clip - target);
            if e1 >= e2 {
                (e1, 2.0 * (v - target))
            } else {
                // e2 > e1 only when v strayed outside the clip range, where
                // v_clip is constant in v.
                (e2, 0.0)
            }
        } else {
            ((v - target) * (v - target), 2.0 * (v - target))
        };
        vf_sum += term;
        let (vg, _) = value.net.backward(&v_trace, &[cfg.c1 * dv / n]);
        value_grads.add_scaled(&vg, 1.0);
    }

    let clip_part = -clip_sum / n;
    let vf_part = vf_sum / n;
    let ent_part = -ent_sum / n;
    let mut total = clip_part + cfg.c1 * vf_part + cfg.c2 * ent_part;

    // Generalization term, evaluated once per minibatch on the current
    // policy. Skipped when inactive so the standard path stays bit-exact.
    let mut gen_part = 0.0;
    if cfg.c3 != 0.0 {
        if let Some(hook) = hook {
            let (score, d_score) = hook.score_with_grad(policy)?;
            gen_part = -score;
            total += cfg.c3 * gen_part;
            policy_grads.add_scaled(&d_score, -cfg.c3);
        }
    }

    if !total.is_finite() {
        return Err(PpoError::NonFiniteLoss);
    }
    Ok(PpoLossOutput {
        parts: LossParts { total, clip: clip_part, vf: vf_part, ent: ent_part, gen: gen_part },
        policy_grads,
        value_grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ppo::{compute_gae, PolicyNet, ValueNet};
    use crate::rng::SplitMix64;

    pub(crate) fn random_buffer(
        obs_dim: usize,
        num_actions: usize,
        len: usize,
        seed: u64,
    ) -> RolloutBuffer {
        let mut rng = SplitMix64::new(seed);
        let mut buffer = RolloutBuffer {
            obs: (0..len).map(|_| (0..obs_dim).map(|_| rng.uniform(0.0, 1.0)).collect()).collect(),
            actions: (0..len).map(|_| rng.next_below(num_actions)).collect(),
            rewards: (0..len).map(|_| rng.uniform(0.0, 1.0)).collect(),
            dones: (0..len).map(|_| rng.next_f64() < 0.1).collect(),
            log_probs_old: (0..len).map(|_| rng.uniform(-2.5, -0.1)).collect(),
            values_old: (0..len).map(|_| rng.uniform(-0.5, 0.5)).collect(),
            ..RolloutBuffer::default()
        };
        compute_gae(&mut buffer, 0.99, 0.95, rng.uniform(-0.5, 0.5));
        buffer
    }

    #[test]
    fn surrogate_clips_positive_advantage() {
        // r = 1.5, eps = 0.2, A = +1: min(1.5, 1.2) = 1.2.
        assert_eq!(clipped_surrogate(1.5, 1.0, 0.2), 1.2);
    }

    #[test]
    fn surrogate_takes_pessimistic_branch_for_negative_advantage() {
        // r = 0.5, A = -1: min(-0.5, -0.8) = -0.8.
        assert_eq!(clipped_surrogate(0.5, -1.0, 0.2), -0.8);
    }

    #[test]
    fn surrogate_never_exceeds_clip_bound() {
        let mut rng = SplitMix64::new(3);
        for _ in 0..2000 {
            let ratio = rng.uniform(0.0, 4.0);
            let adv = rng.uniform(-3.0, 3.0);
            let eps = rng.uniform(0.05, 0.5);
            assert!(clipped_surrogate(ratio, adv, eps) <= (1.0 + eps) * adv.abs() + 1e-12);
        }
    }

    #[test]
    fn entropy_of_softmax_policy_is_bounded() {
        let mut rng = SplitMix64::new(5);
        let policy = PolicyNet::new(4, 6, 7, 8);
        for _ in 0..200 {
            let obs: Vec<f64> = (0..4).map(|_| rng.uniform(-2.0, 2.0)).collect();
            let trace = policy.forward_trace(&obs).unwrap();
            let h = entropy(trace.output(), &log_softmax(trace.logits()));
            assert!(h >= 0.0);
            assert!(h <= (7.0f64).ln() + 1e-12);
        }
    }

    use crate::ppo::test_support::ConstScore;

    #[test]
    fn c3_zero_is_bit_identical_to_standard_path() {
        let policy = PolicyNet::new(5, 6, 4, 11);
        let value = ValueNet::new(5, 6, 12);
        let buffer = random_buffer(5, 4, 32, 13);
        let indices: Vec<usize> = (0..32).collect();
        let cfg = PpoConfig { c3: 0.0, ..PpoConfig::default() };

        let hook = ConstScore(0.7);
        let with_hook = ppo_loss(&policy, &value, &buffer, &indices, &cfg, Some(&hook)).unwrap();
        let without = ppo_loss(&policy, &value, &buffer, &indices, &cfg, None).unwrap();

        assert_eq!(with_hook.parts.total.to_bits(), without.parts.total.to_bits());
        let a = with_hook.policy_grads.flatten();
        let b = without.policy_grads.flatten();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        let av = with_hook.value_grads.flatten();
        let bv = without.value_grads.flatten();
        assert!(av.iter().zip(&bv).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn constant_predictor_leaves_policy_gradients_unchanged() {
        // With c3 > 0 but dG/dtheta = 0, only the scalar loss shifts.
        let policy = PolicyNet::new(5, 6, 4, 21);
        let value = ValueNet::new(5, 6, 22);
        let buffer = random_buffer(5, 4, 24, 23);
        let indices: Vec<usize> = (0..24).collect();
        let cfg = PpoConfig { c3: 0.5, ..PpoConfig::default() };

        let hook = ConstScore(0.3);
        let upgraded = ppo_loss(&policy, &value, &buffer, &indices, &cfg, Some(&hook)).unwrap();
        let standard = ppo_loss(&policy, &value, &buffer, &indices, &cfg, None).unwrap();

        let a = upgraded.policy_grads.flatten();
        let b = standard.policy_grads.flatten();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!((upgraded.parts.total - (standard.parts.total + 0.5 * -0.3)).abs() < 1e-15);
        assert_eq!(upgraded.parts.gen, -0.3);
    }

    /// Independent reference: the loss value assembled with a separate,
    /// straightforward pass (no gradient bookkeeping).
    fn reference_standard_loss(
        policy: &PolicyNet,
        value: &ValueNet,
        buffer: &RolloutBuffer,
        indices: &[usize],
        cfg: &PpoConfig,
    ) -> f64 {
        let n = indices.len() as f64;
        let raw: Vec<f64> = indices.iter().map(|i| buffer.advantages[*i]).collect();
        let mean = raw.iter().sum::<f64>() / n;
        let std =
            (raw.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n).sqrt() + 1e-8;
        let mut clip = 0.0;
        let mut vf = 0.0;
        let mut ent = 0.0;
        for (slot, &i) in indices.iter().enumerate() {
            let probs = policy.probs(&buffer.obs[i]).unwrap();
            let lp = probs[buffer.actions[i]].ln();
            let ratio = (lp - buffer.log_probs_old[i]).exp();
            let adv = (raw[slot] - mean) / std;
            clip += clipped_surrogate(ratio, adv, cfg.clip_eps);
            ent += -probs.iter().map(|p| p * p.ln()).sum::<f64>();
            let v = value.value(&buffer.obs[i]).unwrap();
            let v_old = buffer.values_old[i];
            let v_clip = v_old + (v - v_old).clamp(-cfg.clip_eps, cfg.clip_eps);
            let r = buffer.returns[i];
            vf += ((v - r) * (v - r)).max((v_clip - r) * (v_clip - r));
        }
        -clip / n + cfg.c1 * vf / n - cfg.c2 * ent / n
    }

    #[test]
    fn loss_value_matches_independent_reference() {
        let policy = PolicyNet::new(6, 5, 3, 31);
        let value = ValueNet::new(6, 5, 32);
        let buffer = random_buffer(6, 3, 40, 33);
        let indices: Vec<usize> = (0..40).collect();
        let cfg = PpoConfig::default();
        let out = ppo_loss(&policy, &value, &buffer, &indices, &cfg, None).unwrap();
        let reference = reference_standard_loss(&policy, &value, &buffer, &indices, &cfg);
        assert!((out.parts.total - reference).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences_without_hook() {
        use crate::check::{central_diff_grad, max_rel_err};
        let policy = PolicyNet::new(6, 4, 3, 41);
        let value = ValueNet::new(6, 4, 42);
        let buffer = random_buffer(6, 3, 16, 43);
        let indices: Vec<usize> = (0..16).collect();
        let cfg = PpoConfig::default();

        let out = ppo_loss(&policy, &value, &buffer, &indices, &cfg, None).unwrap();

        let theta = policy.net.flat_params();
        let fd_theta = central_diff_grad(
            |p: &[f64]| {
                let mut pol = policy.clone();
                pol.net.set_flat_params(p).unwrap();
                ppo_loss(&pol, &value, &buffer, &indices, &cfg, None).unwrap().parts.total
            },
            &theta,
            1e-6,
        );
        assert!(max_rel_err(&out.policy_grads.flatten(), &fd_theta) < 1e-5);

        let phi = value.net.flat_params();
        let fd_phi = central_diff_grad(
            |p: &[f64]| {
                let mut val = value.clone();
                val.net.set_flat_params(p).unwrap();
                ppo_loss(&policy, &val, &buffer, &indices, &cfg, None).unwrap().parts.total
            },
            &phi,
            1e-6,
        );
        assert!(max_rel_err(&out.value_grads.flatten(), &fd_phi) < 1e-5);
    }
}
