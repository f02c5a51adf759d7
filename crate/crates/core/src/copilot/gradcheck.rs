//! Central finite-difference checks of the analytic policy gradients on
//! randomly drawn small networks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::policy::{gaussian_log_prob, Policy, PolicyCache, ACT_DIM};
use super::ppo::{loss_and_grad, Sample};
use crate::nn::Activation;
use crate::tasks::OBS_DIM;

pub const FD_STEP: f64 = 1e-6;

/// Worst relative error `|a − n| / max(|a|, |n|, floor)` over all parameters.
fn compare(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

fn central_difference(params: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut p = params.to_vec();
    (0..params.len())
        .map(|i| {
            let x = p[i];
            p[i] = x + FD_STEP;
            let hi = f(&p);
            p[i] = x - FD_STEP;
            let lo = f(&p);
            p[i] = x;
            (hi - lo) / (2.0 * FD_STEP)
        })
        .collect()
}

fn random_policy(rng: &mut ChaCha8Rng) -> Policy {
    let depth = rng.random_range(1..=2);
    let hidden: Vec<usize> = (0..depth).map(|_| rng.random_range(3..=6)).collect();
    let mut p = Policy::new(hidden, Activation::Elu, rng.random_range(-1.0..0.0), rng).expect("valid sizes");
    p.params.iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
    p
}

fn random_obs(rng: &mut ChaCha8Rng) -> [f64; OBS_DIM] {
    let mut x = [0.0; OBS_DIM];
    x.iter_mut().for_each(|v| *v = rng.random_range(-2.0..2.0));
    x
}

/// Log-probability gradient check; returns the worst relative error.
pub fn log_prob_check(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let policy = random_policy(&mut rng);
    let x = random_obs(&mut rng);
    let mut u = [0.0; ACT_DIM];
    u.iter_mut().for_each(|v| *v = rng.random_range(-1.5..1.5));
    let (_, analytic) = policy.log_prob_and_grad(&policy.params, &x, &u);
    let numeric = central_difference(&policy.params, |p| {
        let out = policy.forward_with(p, &x, &mut PolicyCache::default());
        gaussian_log_prob(&u, &out.mu, &out.log_std)
    });
    compare(&analytic, &numeric, 1e-3)
}

/// Full PPO loss gradient check on a three-sample batch. Behavior log
/// densities are offset so every ratio sits well inside or well outside the
/// clip interval, away from the kinks of the surrogate.
pub fn surrogate_check(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let policy = random_policy(&mut rng);
    let clip = 0.2;
    let samples: Vec<Sample> = (0..3)
        .map(|i| {
            let obs = random_obs(&mut rng);
            let out = policy.forward(&obs, &mut PolicyCache::default());
            let mut u = out.mu;
            u.iter_mut().for_each(|v| *v += rng.random_range(-0.5..0.5));
            let lp = gaussian_log_prob(&u, &out.mu, &out.log_std);
            let log_ratio: f64 = match i {
                0 => rng.random_range(-0.1..0.1),
                1 => 0.5,
                _ => -0.5,
            };
            let mut mu = out.mu;
            mu.iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
            Sample {
                obs,
                u,
                log_prob: lp - log_ratio,
                mu,
                log_std: out.log_std,
                advantage: if rng.random_bool(0.5) { rng.random_range(0.2..2.0) } else { rng.random_range(-2.0..-0.2) },
                target: rng.random_range(-1.0..1.0),
            }
        })
        .collect();
    let batch: Vec<&Sample> = samples.iter().collect();
    let (_, analytic) = loss_and_grad(&policy, &policy.params, &batch, clip, 2.0, 0.01);
    let numeric = central_difference(&policy.params, |p| loss_and_grad(&policy, p, &batch, clip, 2.0, 0.01).0.total);
    compare(&analytic, &numeric, 1e-3)
}
