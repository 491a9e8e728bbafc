//! Experience collection and generalized advantage estimation.

use crate::grid::{GridWorld, Observation};
use crate::rng::SplitMix64;

use super::{PolicyNet, PpoError, ValueNet};

/// One rollout's worth of transitions plus the quantities PPO derives from
/// them. `dones[t]` marks that the episode ended at step `t`, so no value
/// bootstraps across that boundary.
#[derive(Debug, Clone, Default)]
pub struct RolloutBuffer {
    pub obs: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    pub log_probs_old: Vec<f64>,
    pub values_old: Vec<f64>,
    /// TD residuals, filled by [`compute_gae`].
    pub deltas: Vec<f64>,
    /// GAE advantages, filled by [`compute_gae`] (un-normalized; loss
    /// normalizes per minibatch).
    pub advantages: Vec<f64>,
    /// Value targets `R = A + V_old`, filled by [`compute_gae`].
    pub returns: Vec<f64>,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Collects exactly `n_steps` transitions, sampling actions from the policy
/// and auto-resetting the environment at episode boundaries. `cur_obs` and
/// `ep_return` carry episode state across successive rollouts; returns of
/// episodes completed during this rollout come back alongside the buffer.
pub fn collect_rollout(
    policy: &PolicyNet,
    value: &ValueNet,
    world: &mut GridWorld,
    cur_obs: &mut Observation,
    ep_return: &mut f64,
    n_steps: usize,
    rng: &mut SplitMix64,
) -> Result<(RolloutBuffer, Vec<f64>), PpoError> {
    let mut buffer = RolloutBuffer::default();
    let mut completed = Vec::new();
    for _ in 0..n_steps {
        let obs_values = cur_obs.values().to_vec();
        let (action, log_prob) = policy.sample_action(&obs_values, rng)?;
        let v = value.value(&obs_values)?;
        let outcome = world.step(action)?;

        buffer.obs.push(obs_values);
        buffer.actions.push(action);
        buffer.rewards.push(outcome.reward);
        buffer.dones.push(outcome.done);
        buffer.log_probs_old.push(log_prob);
        buffer.values_old.push(v);

        *ep_return += outcome.reward;
        if outcome.done {
            completed.push(*ep_return);
            *ep_return = 0.0;
            *cur_obs = world.reset();
        } else {
            *cur_obs = outcome.obs;
        }
    }
    Ok((buffer, completed))
}

/// Fills `deltas`, `advantages` and `returns`:
///
/// ```text
/// delta_t = r_t + gamma * V(s_{t+1}) * (1 - done_t) - V(s_t)
/// A_t     = delta_t + gamma * lambda * (1 - done_t) * A_{t+1}
/// R_t     = A_t + V(s_t)
/// ```
///
/// computed right to left; `bootstrap_value` stands in for `V(s_{t+1})` at
/// the buffer boundary (and is masked out if the last step was terminal).
pub fn compute_gae(buffer: &mut RolloutBuffer, gamma: f64, lam: f64, bootstrap_value: f64) {
    let n = buffer.len();
    buffer.deltas = vec![0.0; n];
    buffer.advantages = vec![0.0; n];
    buffer.returns = vec![0.0; n];
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let cont = if buffer.dones[t] { 0.0 } else { 1.0 };
        let next_value = if t + 1 < n { buffer.values_old[t + 1] } else { bootstrap_value };
        let delta = buffer.rewards[t] + gamma * next_value * cont - buffer.values_old[t];
        next_adv = delta + gamma * lam * cont * next_adv;
        buffer.deltas[t] = delta;
        buffer.advantages[t] = next_adv;
        buffer.returns[t] = next_adv + buffer.values_old[t];
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{generate, GridSpec};

    fn tiny_nets() -> (PolicyNet, ValueNet) {
        (PolicyNet::new(crate::grid::OBS_LEN, 8, 7, 3), ValueNet::new(crate::grid::OBS_LEN, 8, 4))
    }

    fn collect(n_steps: usize, seed: u64) -> (RolloutBuffer, Vec<f64>) {
        let (policy, value) = tiny_nets();
        let mut world = generate(&GridSpec::with_seed(2)).unwrap();
        let mut obs = world.reset();
        let mut ep_return = 0.0;
        let mut rng = SplitMix64::new(seed);
        collect_rollout(&policy, &value, &mut world, &mut obs, &mut ep_return, n_steps, &mut rng)
            .unwrap()
    }

    #[test]
    fn buffer_has_exactly_n_steps() {
        let (buffer, _) = collect(300, 0);
        assert_eq!(buffer.len(), 300);
    }

    #[test]
    fn log_probs_are_nonpositive() {
        let (buffer, _) = collect(300, 0);
        assert!(buffer.log_probs_old.iter().all(|lp| *lp <= 0.0));
    }

    #[test]
    fn collection_is_deterministic() {
        let (a, ca) = collect(256, 9);
        let (b, cb) = collect(256, 9);
        assert_eq!(a.actions, b.actions);
        assert_eq!(ca, cb);
        assert!(a
            .log_probs_old
            .iter()
            .zip(&b.log_probs_old)
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    fn hand_buffer(rewards: &[f64], values: &[f64], dones: &[bool]) -> RolloutBuffer {
        RolloutBuffer {
            obs: vec![vec![]; rewards.len()],
            actions: vec![0; rewards.len()],
            rewards: rewards.to_vec(),
            dones: dones.to_vec(),
            log_probs_old: vec![0.0; rewards.len()],
            values_old: values.to_vec(),
            ..RolloutBuffer::default()
        }
    }

    #[test]
    fn gae_hand_case() {
        // gamma = lambda = 1, rewards [1, 1], V = 0, terminal at the end:
        // deltas are [1, 1] and advantages accumulate to [2, 1].
        let mut buffer = hand_buffer(&[1.0, 1.0], &[0.0, 0.0], &[false, true]);
        compute_gae(&mut buffer, 1.0, 1.0, 123.0);
        assert_eq!(buffer.advantages, vec![2.0, 1.0]);
        assert_eq!(buffer.returns, vec![2.0, 1.0]);
    }

    #[test]
    fn lambda_zero_reduces_to_td_residuals() {
        let mut buffer = hand_buffer(
            &[0.5, -0.25, 1.0, 0.0],
            &[0.2, -0.1, 0.3, 0.7],
            &[false, false, true, false],
        );
        compute_gae(&mut buffer, 0.9, 0.0, 0.4);
        assert_eq!(buffer.advantages, buffer.deltas);
    }

    /// Independent oracle: A_t as the explicit discounted sum of TD
    /// residuals, cut at episode boundaries.
    pub(crate) fn brute_force_gae(
        rewards: &[f64],
        values: &[f64],
        dones: &[bool],
        gamma: f64,
        lam: f64,
        bootstrap: f64,
    ) -> Vec<f64> {
        let n = rewards.len();
        let delta = |t: usize| -> f64 {
            let cont = if dones[t] { 0.0 } else { 1.0 };
            let nv = if t + 1 < n { values[t + 1] } else { bootstrap };
            rewards[t] + gamma * nv * cont - values[t]
        };
        (0..n)
            .map(|t| {
                let mut acc = 0.0;
                let mut weight = 1.0;
                for k in t..n {
                    acc += weight * delta(k);
                    if dones[k] {
                        break;
                    }
                    weight *= gamma * lam;
                }
                acc
            })
            .collect()
    }

    #[test]
    fn recursion_matches_brute_force() {
        let mut rng = SplitMix64::new(17);
        for case in 0..50 {
            let n = 1 + rng.next_below(64);
            let rewards: Vec<f64> = (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let values: Vec<f64> = (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let dones: Vec<bool> = (0..n).map(|_| rng.next_f64() < 0.15).collect();
            let bootstrap = rng.uniform(-1.0, 1.0);
            let gamma = rng.uniform(0.5, 1.0);
            let lam = rng.uniform(0.0, 1.0);

            let mut buffer = hand_buffer(&rewards, &values, &dones);
            compute_gae(&mut buffer, gamma, lam, bootstrap);
            let oracle = brute_force_gae(&rewards, &values, &dones, gamma, lam, bootstrap);
            for (a, b) in buffer.advantages.iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-10, "case {case}: {a} vs {b}");
            }
        }
    }
}
