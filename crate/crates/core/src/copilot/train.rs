//! Synchronous PPO training of a residual copilot against a base pilot.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::policy::{squashed_log_prob, Policy, PolicyCache, PolicyOutput, ACT_DIM};
use super::ppo::{ppo_update, PpoConfig, PpoState, RolloutBuffer, Transition};
use crate::error::Result;
use crate::pilots::{Pilot, PilotSpec};
use crate::rollout::{env_seed, pilot_seed, EnvConfig};
use crate::se3::{compose_residual, BaseAction, ResidualAction, ResidualScale};
use crate::seeds::{episode_seed, hash_str, mix};
use crate::tasks::{observe_copilot, Env, OBS_DIM};

/// The environment a copilot trains in and the pilot it assists.
#[derive(Clone, Debug)]
pub struct TrainSetup {
    pub env: EnvConfig,
    pub pilot: PilotSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub iteration: usize,
    pub env_steps: u64,
    /// Episodes that finished during this iteration; the episode statistics
    /// carry over from the previous point when zero.
    pub episodes: usize,
    pub mean_return: f64,
    pub mean_progression: f64,
    pub success_rate: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub kl: f64,
    pub clip_fraction: f64,
    pub lr: f64,
}

pub struct TrainOutcome {
    pub policy: Policy,
    pub curve: Vec<CurvePoint>,
}

struct EpisodeStat {
    ret: f64,
    progression: f64,
    success: bool,
}

struct Actor {
    id: u64,
    env: Env,
    pilot: Box<dyn Pilot>,
    rng: ChaCha8Rng,
    base_seed: u64,
    episode: u64,
    prev_res: ResidualAction,
    pending: Option<(BaseAction, [f64; OBS_DIM])>,
    ep_return: f64,
}

struct Segment {
    steps: Vec<Transition>,
    raw_obs: Vec<[f64; OBS_DIM]>,
    bootstrap: f64,
    finished: Vec<EpisodeStat>,
}

impl Actor {
    fn start_episode(&mut self) {
        let seed = episode_seed(self.base_seed, "train", mix(self.id, self.episode));
        self.episode += 1;
        self.env.reset(env_seed(seed));
        self.pilot.reset(pilot_seed(seed));
        self.prev_res = ResidualAction::zero();
        self.pending = None;
        self.ep_return = 0.0;
    }

    fn observe(&mut self) -> Result<(BaseAction, [f64; OBS_DIM])> {
        if let Some(p) = self.pending {
            return Ok(p);
        }
        let base = self.pilot.act(&self.env.state, &self.env.spec)?;
        let obs = observe_copilot(&self.env.state, &base, &self.prev_res);
        self.pending = Some((base, obs));
        Ok((base, obs))
    }

    fn collect(&mut self, policy: &Policy, horizon: usize, scale: &ResidualScale) -> Result<Segment> {
        let mut seg = Segment { steps: Vec::with_capacity(horizon), raw_obs: Vec::with_capacity(horizon), bootstrap: 0.0, finished: Vec::new() };
        let mut cache = PolicyCache::default();
        for _ in 0..horizon {
            let (base, raw) = self.observe()?;
            self.pending = None;
            let x = policy.normalize_obs(&raw)?;
            let out = policy.forward(&x, &mut cache);
            let (res, u) = sample_from(&out, &mut self.rng)?;
            let action = compose_residual(&base, &res, scale);
            let step = self.env.step(&action, &self.prev_res, &res)?;
            self.prev_res = res;
            self.ep_return += step.reward;
            let mut obs = [0.0; OBS_DIM];
            obs.copy_from_slice(&x);
            seg.raw_obs.push(raw);
            seg.steps.push(Transition {
                obs,
                u,
                log_prob: squashed_log_prob(&u, &out.mu, &out.log_std),
                mu: out.mu,
                log_std: out.log_std,
                value: out.value,
                reward: step.reward,
                done: step.done,
            });
            if step.done {
                seg.finished.push(EpisodeStat { ret: self.ep_return, progression: self.env.progression(), success: self.env.state.succeeded });
                self.start_episode();
            }
        }
        let (_, raw) = self.observe()?;
        seg.bootstrap = policy.forward(&policy.normalize_obs(&raw)?, &mut cache).value;
        Ok(seg)
    }
}

fn sample_from(out: &PolicyOutput, rng: &mut ChaCha8Rng) -> Result<(ResidualAction, [f64; ACT_DIM])> {
    use rand_distr::{Distribution, StandardNormal};
    let mut u = out.mu;
    for (j, v) in u.iter_mut().enumerate() {
        let e: f64 = StandardNormal.sample(rng);
        *v += out.log_std[j].exp() * e;
    }
    let a: Vec<f64> = u.iter().map(|x| x.tanh()).collect();
    Ok((ResidualAction::from_slice(&a)?, u))
}

/// Train a copilot. `on_iteration` sees every curve point together with the
/// current (unfrozen) policy, which is where callers checkpoint.
pub fn train(setup: &TrainSetup, cfg: &PpoConfig, mut on_iteration: Option<&mut dyn FnMut(&CurvePoint, &Policy) -> Result<()>>) -> Result<TrainOutcome> {
    cfg.validate()?;
    setup.env.validate()?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, hash_str("init")));
    let mut policy = Policy::new(cfg.hidden.clone(), crate::nn::Activation::Elu, cfg.init_log_std, &mut init_rng)?;
    let mut update_rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, hash_str("minibatch")));
    let mut state = PpoState::new(&policy, cfg);
    let mut actors: Vec<Actor> = (0..cfg.actors as u64)
        .map(|id| {
            let mut a = Actor {
                id,
                env: setup.env.make_env(),
                pilot: setup.pilot.build(&setup.env.scale)?,
                rng: ChaCha8Rng::seed_from_u64(mix(mix(cfg.seed, hash_str("sample")), id)),
                base_seed: cfg.seed,
                episode: 0,
                prev_res: ResidualAction::zero(),
                pending: None,
                ep_return: 0.0,
            };
            a.start_episode();
            Ok(a)
        })
        .collect::<Result<_>>()?;

    let per_iter = cfg.batch_size() as u64;
    let iterations = cfg.total_steps.div_ceil(per_iter).max(1) as usize;
    let mut curve: Vec<CurvePoint> = Vec::with_capacity(iterations);
    let mut buffer = RolloutBuffer::new(cfg.horizon, cfg.actors);
    for it in 0..iterations {
        let snapshot = &policy;
        let segments: Vec<Segment> = actors.par_iter_mut().map(|a| a.collect(snapshot, cfg.horizon, &setup.env.scale)).collect::<Result<_>>()?;
        buffer.clear();
        let mut finished = Vec::new();
        for seg in &segments {
            buffer.steps.extend(seg.steps.iter().cloned());
            buffer.bootstrap.push(seg.bootstrap);
            finished.extend(seg.finished.iter().map(|e| (e.ret, e.progression, e.success)));
        }
        buffer.finish(&policy, cfg.gamma, cfg.lambda)?;
        let stats = ppo_update(&mut policy, &mut state, &buffer, cfg, &mut update_rng)?;
        for seg in &segments {
            for o in &seg.raw_obs {
                policy.obs_norm.update(o)?;
            }
        }

        let prev = curve.last();
        let n = finished.len();
        let mean = |f: &dyn Fn(&(f64, f64, bool)) -> f64, carry: f64| if n == 0 { carry } else { finished.iter().map(f).sum::<f64>() / n as f64 };
        let point = CurvePoint {
            iteration: it,
            env_steps: per_iter * (it as u64 + 1),
            episodes: n,
            mean_return: mean(&|e| e.0, prev.map_or(0.0, |p| p.mean_return)),
            mean_progression: mean(&|e| e.1, prev.map_or(0.0, |p| p.mean_progression)),
            success_rate: mean(&|e| if e.2 { 1.0 } else { 0.0 }, prev.map_or(0.0, |p| p.success_rate)),
            policy_loss: stats.policy_loss,
            value_loss: stats.value_loss,
            kl: stats.kl,
            clip_fraction: stats.clip_fraction,
            lr: stats.lr,
        };
        if let Some(cb) = on_iteration.as_deref_mut() {
            cb(&point, &policy)?;
        }
        curve.push(point);
    }
    policy.obs_norm.freeze();
    policy.value_norm.freeze();
    Ok(TrainOutcome { policy, curve })
}
