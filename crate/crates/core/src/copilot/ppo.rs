//! Clipped-surrogate policy optimization with generalized advantage
//! estimation and a KL-driven learning-rate schedule.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::policy::{gaussian_log_prob, Policy, PolicyCache, ACT_DIM};
use crate::error::{invalid_arg, Error, Result};
use crate::nn::{clip_grad_norm, Adam};
use crate::tasks::OBS_DIM;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub clip: f64,
    pub kl_threshold: f64,
    pub lr: f64,
    pub lr_min: f64,
    pub lr_max: f64,
    pub entropy_coef: f64,
    pub critic_coef: f64,
    pub grad_clip: f64,
    pub epochs: usize,
    pub horizon: usize,
    pub actors: usize,
    pub minibatch: usize,
    pub hidden: Vec<usize>,
    pub init_log_std: f64,
    pub total_steps: u64,
    pub seed: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            gamma: 0.995,
            lambda: 0.95,
            clip: 0.2,
            kl_threshold: 0.008,
            lr: 1e-4,
            lr_min: 1e-6,
            lr_max: 1e-2,
            entropy_coef: 0.0,
            critic_coef: 2.0,
            grad_clip: 1.0,
            epochs: 4,
            horizon: 128,
            actors: 16,
            minibatch: 512,
            hidden: vec![128, 64],
            init_log_std: -1.5,
            total_steps: 3_000_000,
            seed: 0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.gamma > 0.0
            && self.gamma <= 1.0
            && (0.0..=1.0).contains(&self.lambda)
            && self.clip > 0.0
            && self.kl_threshold > 0.0
            && self.lr_min > 0.0
            && self.lr_min <= self.lr
            && self.lr <= self.lr_max
            && self.entropy_coef >= 0.0
            && self.critic_coef >= 0.0
            && self.grad_clip > 0.0
            && self.epochs >= 1
            && self.horizon >= 1
            && self.actors >= 1
            && self.minibatch >= 1
            && !self.hidden.is_empty()
            && !self.hidden.contains(&0)
            && self.init_log_std.is_finite();
        if !ok {
            return Err(invalid_arg(format!("invalid ppo config {self:?}")));
        }
        Ok(())
    }

    pub fn batch_size(&self) -> usize {
        self.horizon * self.actors
    }
}

/// One stored transition. `obs` is already normalized with the snapshot the
/// segment was collected under; `value` is in normalized value units.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub obs: [f64; OBS_DIM],
    pub u: [f64; ACT_DIM],
    pub log_prob: f64,
    pub mu: [f64; ACT_DIM],
    pub log_std: [f64; ACT_DIM],
    pub value: f64,
    pub reward: f64,
    pub done: bool,
}

/// Transitions laid out actor-major: actor `a` owns
/// `steps[a * horizon..(a + 1) * horizon]`.
#[derive(Clone, Debug, Default)]
pub struct RolloutBuffer {
    pub horizon: usize,
    pub actors: usize,
    pub steps: Vec<Transition>,
    /// Normalized value of the observation following each actor's last step.
    pub bootstrap: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl RolloutBuffer {
    pub fn new(horizon: usize, actors: usize) -> Self {
        RolloutBuffer {
            horizon,
            actors,
            steps: Vec::with_capacity(horizon * actors),
            bootstrap: Vec::with_capacity(actors),
            advantages: Vec::new(),
            returns: Vec::new(),
        }
    }

    pub fn is_full(&self) -> bool {
        self.steps.len() == self.horizon * self.actors && self.bootstrap.len() == self.actors
    }

    pub fn clear(&mut self) {
        self.steps.clear();
        self.bootstrap.clear();
        self.advantages.clear();
        self.returns.clear();
    }

    /// Fill advantages (normalized) and raw returns using the value
    /// normalizer to map stored values back to reward units.
    pub fn finish(&mut self, policy: &Policy, gamma: f64, lambda: f64) -> Result<()> {
        if !self.is_full() {
            return Err(invalid_arg("rollout buffer is not full"));
        }
        let raw = |v: f64| v * policy.value_norm.std(0) + policy.value_norm.mean[0];
        self.advantages.clear();
        self.returns.clear();
        for a in 0..self.actors {
            let seg = &self.steps[a * self.horizon..(a + 1) * self.horizon];
            let rewards: Vec<f64> = seg.iter().map(|t| t.reward).collect();
            let values: Vec<f64> = seg.iter().map(|t| raw(t.value)).collect();
            let dones: Vec<bool> = seg.iter().map(|t| t.done).collect();
            let (adv, ret) = gae(&rewards, &values, &dones, raw(self.bootstrap[a]), gamma, lambda);
            self.advantages.extend(adv);
            self.returns.extend(ret);
        }
        normalize_advantages(&mut self.advantages);
        Ok(())
    }
}

/// GAE over one actor's segment. `dones[t]` marks that step `t` ended an
/// episode, so nothing is bootstrapped across it.
pub fn gae(rewards: &[f64], values: &[f64], dones: &[bool], last_value: f64, gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut acc = 0.0;
    for t in (0..n).rev() {
        let next_value = if t + 1 < n { values[t + 1] } else { last_value };
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        acc = delta + gamma * lambda * live * acc;
        adv[t] = acc;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-8);
    adv.iter_mut().for_each(|a| *a = (*a - mean) / std);
}

/// A training sample as seen by the loss.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub obs: [f64; OBS_DIM],
    pub u: [f64; ACT_DIM],
    /// Gaussian log density of `u` under the behavior policy. The squashing
    /// correction does not depend on parameters and cancels in the ratio.
    pub log_prob: f64,
    pub mu: [f64; ACT_DIM],
    pub log_std: [f64; ACT_DIM],
    pub advantage: f64,
    /// Return target in normalized value units.
    pub target: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
    pub total: f64,
    /// Mean exact KL(old ‖ new) between diagonal Gaussians.
    pub kl: f64,
    pub clip_fraction: f64,
}

/// Mean loss over `batch` and its gradient with respect to `params`.
pub fn loss_and_grad(policy: &Policy, params: &[f64], batch: &[&Sample], clip: f64, critic_coef: f64, entropy_coef: f64) -> (LossParts, Vec<f64>) {
    let mut grad = vec![0.0; params.len()];
    let mut parts = LossParts::default();
    let n = batch.len().max(1) as f64;
    let ls_off = policy.log_std_offset();
    let mut cache = PolicyCache::default();
    for s in batch {
        let out = policy.forward_with(params, &s.obs, &mut cache);
        let lp = gaussian_log_prob(&s.u, &out.mu, &out.log_std);
        let ratio = (lp - s.log_prob).exp();
        let a = s.advantage;
        let clipped = ratio.clamp(1.0 - clip, 1.0 + clip);
        let (unclipped_term, clipped_term) = (ratio * a, clipped * a);
        let surrogate = unclipped_term.min(clipped_term);
        parts.policy += -surrogate;
        // The min selects the clipped branch only when it is strictly smaller,
        // in which case the gradient through the ratio vanishes.
        let active = unclipped_term <= clipped_term;
        if (ratio - clipped).abs() > 0.0 {
            parts.clip_fraction += 1.0;
        }
        let g_lp = if active { -a * ratio / n } else { 0.0 };

        let dv = out.value - s.target;
        parts.value += dv * dv;
        let g_v = critic_coef * 2.0 * dv / n;

        let mut g_mu = [0.0; ACT_DIM];
        let mut kl = 0.0;
        for j in 0..ACT_DIM {
            let sigma = out.log_std[j].exp();
            let z = (s.u[j] - out.mu[j]) / sigma;
            g_mu[j] = g_lp * z / sigma;
            grad[ls_off + j] += g_lp * (z * z - 1.0);
            let so = s.log_std[j].exp();
            kl += out.log_std[j] - s.log_std[j] + (so * so + (s.mu[j] - out.mu[j]).powi(2)) / (2.0 * sigma * sigma) - 0.5;
            parts.entropy += out.log_std[j] + 0.5 * (1.0 + (2.0 * std::f64::consts::PI).ln());
        }
        parts.kl += kl;
        policy.backward_with(params, &cache, &g_mu, g_v, &mut grad);
    }
    for j in 0..ACT_DIM {
        grad[ls_off + j] -= entropy_coef;
    }
    parts.policy /= n;
    parts.value /= n;
    parts.entropy /= n;
    parts.kl /= n;
    parts.clip_fraction /= n;
    parts.total = parts.policy + critic_coef * parts.value - entropy_coef * parts.entropy;
    (parts, grad)
}

/// Optimizer state carried across updates.
#[derive(Clone, Debug)]
pub struct PpoState {
    pub adam: Adam,
    pub lr: f64,
}

impl PpoState {
    pub fn new(policy: &Policy, cfg: &PpoConfig) -> Self {
        PpoState { adam: Adam::new(policy.n_params()), lr: cfg.lr }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub kl: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
    pub lr: f64,
    pub minibatches: usize,
}

/// Halve the rate when the KL overshoots the threshold, raise it when far below.
pub fn adapt_lr(lr: f64, kl: f64, cfg: &PpoConfig) -> f64 {
    let lr = if kl > cfg.kl_threshold {
        lr / 2.0
    } else if kl < cfg.kl_threshold / 2.0 {
        lr * 1.5
    } else {
        lr
    };
    lr.clamp(cfg.lr_min, cfg.lr_max)
}

/// Mean KL(behavior ‖ current) over a batch.
pub fn batch_kl(policy: &Policy, samples: &[Sample]) -> f64 {
    let mut cache = PolicyCache::default();
    let total: f64 = samples
        .iter()
        .map(|s| {
            let out = policy.forward(&s.obs, &mut cache);
            (0..ACT_DIM)
                .map(|j| {
                    let (sn, so) = (out.log_std[j].exp(), s.log_std[j].exp());
                    out.log_std[j] - s.log_std[j] + (so * so + (s.mu[j] - out.mu[j]).powi(2)) / (2.0 * sn * sn) - 0.5
                })
                .sum::<f64>()
        })
        .sum();
    total / samples.len().max(1) as f64
}

/// Run the configured epochs of minibatch updates over a finished buffer.
/// The value normalizer is updated with this batch's returns first, and the
/// learning rate for the next update follows the KL reached by this one.
pub fn ppo_update<R: Rng + ?Sized>(policy: &mut Policy, state: &mut PpoState, buffer: &RolloutBuffer, cfg: &PpoConfig, rng: &mut R) -> Result<UpdateStats> {
    if buffer.advantages.len() != buffer.steps.len() || buffer.steps.is_empty() {
        return Err(invalid_arg("advantages must be computed before an update"));
    }
    for r in &buffer.returns {
        policy.value_norm.update(&[*r])?;
    }
    let (vm, vs) = (policy.value_norm.mean[0], policy.value_norm.std(0));
    let samples: Vec<Sample> = buffer
        .steps
        .iter()
        .zip(&buffer.advantages)
        .zip(&buffer.returns)
        .map(|((t, &advantage), &ret)| Sample {
            obs: t.obs,
            u: t.u,
            log_prob: gaussian_log_prob(&t.u, &t.mu, &t.log_std),
            mu: t.mu,
            log_std: t.log_std,
            advantage,
            target: ((ret - vm) / vs).clamp(-crate::se3::RunningNormalizer::CLIP, crate::se3::RunningNormalizer::CLIP),
        })
        .collect();

    let mut stats = UpdateStats::default();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mb = cfg.minibatch.min(samples.len());
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(mb) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
            let (parts, mut grad) = loss_and_grad(policy, &policy.params, &batch, cfg.clip, cfg.critic_coef, cfg.entropy_coef);
            if !parts.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged(format!(
                    "ppo loss {} (policy {}, value {}, kl {}) at lr {:.3e}",
                    parts.total, parts.policy, parts.value, parts.kl, state.lr
                )));
            }
            let norm = clip_grad_norm(&mut grad, cfg.grad_clip);
            state.adam.step(&mut policy.params, &grad, state.lr);
            stats.policy_loss += parts.policy;
            stats.value_loss += parts.value;
            stats.clip_fraction += parts.clip_fraction;
            stats.grad_norm += norm;
            stats.minibatches += 1;
        }
    }
    let k = stats.minibatches as f64;
    stats.policy_loss /= k;
    stats.value_loss /= k;
    stats.kl = batch_kl(policy, &samples);
    if !stats.kl.is_finite() {
        return Err(Error::Diverged(format!("batch kl {} after update at lr {:.3e}", stats.kl, state.lr)));
    }
    state.lr = adapt_lr(state.lr, stats.kl, cfg);
    stats.clip_fraction /= k;
    stats.grad_norm /= k;
    stats.lr = state.lr;
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gae_with_zero_lambda_is_td() {
        let r = [1.0, -0.5, 2.0];
        let v = [0.3, 0.1, -0.2];
        let (adv, ret) = gae(&r, &v, &[false, false, false], 0.7, 0.9, 0.0);
        assert_abs_diff_eq!(adv[0], 1.0 + 0.9 * 0.1 - 0.3, epsilon = 1e-12);
        assert_abs_diff_eq!(adv[1], -0.5 + 0.9 * -0.2 - 0.1, epsilon = 1e-12);
        assert_abs_diff_eq!(adv[2], 2.0 + 0.9 * 0.7 + 0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(ret[2], adv[2] - 0.2, epsilon = 1e-12);
    }

    #[test]
    fn gae_constant_reward_is_geometric() {
        let (g, l, r, n) = (0.995, 0.95, 0.7, 400);
        let (adv, _) = gae(&vec![r; n], &vec![0.0; n], &vec![false; n], 0.0, g, l);
        for (t, a) in adv.iter().enumerate() {
            let k = (n - t) as i32;
            let x: f64 = g * l;
            assert_abs_diff_eq!(*a, r * (1.0 - x.powi(k)) / (1.0 - x), epsilon = 1e-9);
        }
    }

    #[test]
    fn gae_stops_at_done() {
        let (adv, _) = gae(&[1.0, 1.0], &[0.0, 0.0], &[true, false], 100.0, 0.9, 0.9);
        assert_abs_diff_eq!(adv[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(adv[1], 91.0, epsilon = 1e-12);
    }

    #[test]
    fn advantage_normalization() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut a: Vec<f64> = (0..1000).map(|_| rng.random_range(-3.0..10.0)).collect();
        normalize_advantages(&mut a);
        let mean = a.iter().sum::<f64>() / 1000.0;
        let std = (a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 1000.0).sqrt();
        assert!(mean.abs() < 1e-9);
        assert!((std - 1.0).abs() < 1e-6);
    }

    #[test]
    fn lr_schedule() {
        let cfg = PpoConfig::default();
        assert_eq!(adapt_lr(1e-4, 0.02, &cfg), 5e-5);
        assert_abs_diff_eq!(adapt_lr(1e-4, 0.001, &cfg), 1.5e-4, epsilon = 1e-18);
        assert_eq!(adapt_lr(1e-4, 0.006, &cfg), 1e-4);
        assert_eq!(adapt_lr(1e-6, 1.0, &cfg), 1e-6);
    }

    fn toy_buffer(policy: &Policy, n: usize, rng: &mut ChaCha8Rng) -> RolloutBuffer {
        let mut buf = RolloutBuffer::new(n, 1);
        for _ in 0..n {
            let mut obs = [0.0; OBS_DIM];
            obs.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
            let out = policy.forward(&obs, &mut PolicyCache::default());
            let mut u = out.mu;
            u.iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
            buf.steps.push(Transition {
                obs,
                u,
                log_prob: 0.0,
                mu: out.mu,
                log_std: out.log_std,
                value: out.value,
                reward: rng.random_range(-1.0..1.0),
                done: false,
            });
        }
        buf.bootstrap.push(0.0);
        buf
    }

    #[test]
    fn zero_advantages_touch_only_the_critic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut policy = Policy::new(vec![8, 8], Activation::Elu, -0.5, &mut rng).unwrap();
        let mut buf = toy_buffer(&policy, 64, &mut rng);
        buf.finish(&policy, 0.99, 0.95).unwrap();
        buf.advantages.fill(0.0);
        let cfg = PpoConfig { critic_coef: 0.0, minibatch: 16, hidden: vec![8, 8], ..Default::default() };
        let before = policy.params.clone();
        let mut st = PpoState::new(&policy, &cfg);
        let stats = ppo_update(&mut policy, &mut st, &buf, &cfg, &mut rng).unwrap();
        assert_eq!(policy.params, before);
        assert!((0.0..=1.0).contains(&stats.clip_fraction));

        let cfg = PpoConfig { minibatch: 16, hidden: vec![8, 8], ..Default::default() };
        let mut st = PpoState::new(&policy, &cfg);
        ppo_update(&mut policy, &mut st, &buf, &cfg, &mut rng).unwrap();
        let off = policy.log_std_offset();
        let mu = policy.param_ranges()[1].clone();
        assert_eq!(policy.params[off..], before[off..]);
        assert_eq!(policy.params[mu.clone()], before[mu]);
        assert_ne!(policy.params, before);
    }

    #[test]
    fn update_reduces_the_loss_on_a_fixed_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut policy = Policy::new(vec![16], Activation::Elu, -0.5, &mut rng).unwrap();
        let mut buf = toy_buffer(&policy, 128, &mut rng);
        buf.finish(&policy, 0.99, 0.95).unwrap();
        let cfg = PpoConfig { minibatch: 128, epochs: 1, lr: 1e-3, hidden: vec![16], ..Default::default() };
        let mut st = PpoState::new(&policy, &cfg);
        let stats0 = ppo_update(&mut policy, &mut st, &buf, &cfg, &mut rng).unwrap();
        let mut last = stats0;
        for _ in 0..20 {
            last = ppo_update(&mut policy, &mut st, &buf, &cfg, &mut rng).unwrap();
        }
        assert!(last.policy_loss < stats0.policy_loss);
        assert!(last.kl > 0.0);
    }

    #[test]
    fn non_finite_loss_aborts() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut policy = Policy::new(vec![4], Activation::Elu, -0.5, &mut rng).unwrap();
        let mut buf = toy_buffer(&policy, 8, &mut rng);
        buf.finish(&policy, 0.99, 0.95).unwrap();
        buf.advantages[0] = f64::NAN;
        let cfg = PpoConfig { minibatch: 8, hidden: vec![4], ..Default::default() };
        let mut st = PpoState::new(&policy, &cfg);
        assert!(matches!(ppo_update(&mut policy, &mut st, &buf, &cfg, &mut rng), Err(Error::Diverged(_))));
    }

    #[test]
    fn unfinished_buffer_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut policy = Policy::new(vec![4], Activation::Elu, -0.5, &mut rng).unwrap();
        let buf = toy_buffer(&policy, 8, &mut rng);
        let cfg = PpoConfig::default();
        let mut st = PpoState::new(&policy, &cfg);
        assert!(ppo_update(&mut policy, &mut st, &buf, &cfg, &mut rng).is_err());
    }
}
