//! Single-episode rollouts of a pilot, optionally assisted by a copilot.

use crate::admittance::AdmittanceGains;
use crate::copilot::{MeanCopilot, Policy};
use crate::error::{invalid_arg, Result};
use crate::pilots::{DemoDataset, Episode, EpisodeOutcome, Pilot, PilotSpec, Record};
use crate::se3::{compose_residual, ResidualAction, ResidualScale};
use crate::seeds::mix;
use crate::tasks::{observe_copilot, observe_state, DmrConfig, Env, Events, RewardConfig, TaskSpec, OBS_DIM};

const ENV_STREAM: u64 = 0x454e_56;
const PILOT_STREAM: u64 = 0x5049_4c4f_54;

pub fn env_seed(episode_seed: u64) -> u64 {
    mix(episode_seed, ENV_STREAM)
}

pub fn pilot_seed(episode_seed: u64) -> u64 {
    mix(episode_seed, PILOT_STREAM)
}

/// Task, controller, randomization, reward and residual scale of an environment.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnvConfig {
    pub spec: TaskSpec,
    pub gains: AdmittanceGains,
    pub dmr: DmrConfig,
    pub reward: RewardConfig,
    pub scale: ResidualScale,
}

impl EnvConfig {
    /// Simulation gains, default randomization, reward and scale.
    pub fn new(spec: TaskSpec) -> Self {
        EnvConfig { spec, gains: AdmittanceGains::SIM, dmr: DmrConfig::default(), reward: RewardConfig::default(), scale: ResidualScale::default() }
    }

    pub fn make_env(&self) -> Env {
        Env::new(self.spec, self.gains, self.dmr, self.reward, 0)
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        self.gains.params().validate()?;
        self.dmr.validate()?;
        self.reward.validate()?;
        self.scale.validate()
    }
}

/// Anything that maps a copilot observation to a normalized residual.
pub trait Assist {
    fn residual(&mut self, obs: &[f64; OBS_DIM]) -> Result<ResidualAction>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeLog {
    pub seed: u64,
    pub steps: u64,
    pub success: bool,
    pub progression: f64,
    pub max_progression: f64,
    pub total_reward: f64,
    pub grasped: bool,
    pub events: Vec<(u64, Events)>,
    pub records: Vec<Record>,
}

impl EpisodeLog {
    pub fn final_events(&self) -> Events {
        self.events.last().map(|e| e.1).unwrap_or_default()
    }
}

/// Run one episode to termination. `seed` determines both the environment
/// reset and the pilot's random stream.
pub fn run_episode(
    env: &mut Env,
    pilot: &mut dyn Pilot,
    mut assist: Option<&mut dyn Assist>,
    scale: &ResidualScale,
    seed: u64,
    record: bool,
) -> Result<EpisodeLog> {
    env.reset(env_seed(seed));
    pilot.reset(pilot_seed(seed));
    let mut prev_res = ResidualAction::zero();
    let mut log = EpisodeLog {
        seed,
        steps: 0,
        success: false,
        progression: env.progression(),
        max_progression: env.progression(),
        total_reward: 0.0,
        grasped: false,
        events: Vec::new(),
        records: Vec::new(),
    };
    loop {
        let base = pilot.act(&env.state, &env.spec)?;
        let (res, action) = match assist.as_deref_mut() {
            Some(a) => {
                let res = a.residual(&observe_copilot(&env.state, &base, &prev_res))?;
                (Some(res), compose_residual(&base, &res, scale))
            }
            None => (None, base),
        };
        if record {
            log.records.push(Record { t: log.steps, state: observe_state(&env.state), action: base, assisted: res.is_some() });
        }
        let res = res.unwrap_or_default();
        let out = env.step(&action, &prev_res, &res)?;
        log.steps += 1;
        log.total_reward += out.reward;
        if out.events.any() {
            log.events.push((log.steps, out.events));
        }
        let p = env.progression();
        log.progression = p;
        log.max_progression = log.max_progression.max(p);
        prev_res = res;
        if out.done {
            break;
        }
    }
    log.success = env.state.succeeded;
    log.grasped = env.state.ever_attached;
    Ok(log)
}

impl EpisodeLog {
    /// Recorded episode with its trailer. Requires `record = true` at run time.
    pub fn into_episode(self, id: u64) -> Episode {
        let outcome = EpisodeOutcome { seed: self.seed, success: self.success, steps: self.steps, progression: self.progression, events: self.events };
        Episode { id, records: self.records, outcome: Some(outcome) }
    }
}

/// Record one episode per seed, in order. Assisted collection uses the mean
/// residual so the file can be re-simulated from its base actions alone.
pub fn collect_demos(env: &EnvConfig, pilot: &PilotSpec, policy: Option<&Policy>, seeds: &[u64], collector: &str) -> Result<DemoDataset> {
    env.validate()?;
    let mut data = DemoDataset::new(env.spec.kind, collector);
    data.rate_hz = env.spec.control_rate_hz;
    let mut e = env.make_env();
    let mut p = pilot.build(&env.scale)?;
    for (i, &seed) in seeds.iter().enumerate() {
        let mut mc = policy.map(MeanCopilot);
        let log = run_episode(&mut e, p.as_mut(), mc.as_mut().map(|m| m as &mut dyn Assist), &env.scale, seed, true)?;
        data.episodes.push(log.into_episode(i as u64));
    }
    data.validate()?;
    Ok(data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReplayReport {
    pub episode: u64,
    pub steps: u64,
    /// Largest absolute deviation between recorded and re-simulated states.
    pub max_state_error: f64,
    pub events: Vec<(u64, Events)>,
    pub progression: f64,
    /// Events, step count, success and progression agree with the trailer
    /// (vacuously true for an episode without one).
    pub outcome_matches: bool,
}

impl ReplayReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_state_error <= tol && self.outcome_matches
    }
}

/// Re-simulate a recorded episode from its seed and base actions. Records
/// flagged as assisted are recomposed with the mean residual of `policy`.
pub fn replay_episode(env: &EnvConfig, ep: &Episode, policy: Option<&Policy>) -> Result<ReplayReport> {
    let outcome = ep.outcome.as_ref().ok_or_else(|| invalid_arg(format!("episode {} has no trailer, so its seed is unknown", ep.id)))?;
    if ep.records.iter().any(|r| r.assisted) && policy.is_none() {
        return Err(invalid_arg(format!("episode {} contains assisted steps; replay needs the copilot checkpoint", ep.id)));
    }
    let mut e = env.make_env();
    e.reset(env_seed(outcome.seed));
    let mut prev_res = ResidualAction::zero();
    let mut report = ReplayReport { episode: ep.id, steps: 0, max_state_error: 0.0, events: Vec::new(), progression: e.progression(), outcome_matches: true };
    for (i, r) in ep.records.iter().enumerate() {
        if r.t != i as u64 {
            return Err(invalid_arg(format!("episode {}: records must be consecutive from t = 0, found t = {} at index {i}", ep.id, r.t)));
        }
        if e.state.terminated {
            return Err(invalid_arg(format!("episode {}: record at t = {} follows termination", ep.id, r.t)));
        }
        let s = observe_state(&e.state);
        let err = s.iter().zip(&r.state).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        report.max_state_error = report.max_state_error.max(if err.is_nan() { f64::INFINITY } else { err });
        let (res, action) = match (r.assisted, policy) {
            (true, Some(p)) => {
                let res = p.mean_action(&observe_copilot(&e.state, &r.action, &prev_res))?;
                (res, compose_residual(&r.action, &res, &env.scale))
            }
            _ => (ResidualAction::zero(), r.action),
        };
        let out = e.step(&action, &prev_res, &res)?;
        report.steps += 1;
        if out.events.any() {
            report.events.push((report.steps, out.events));
        }
        prev_res = res;
    }
    report.progression = e.progression();
    report.outcome_matches = report.events == outcome.events
        && report.steps == outcome.steps
        && e.state.succeeded == outcome.success
        && report.progression == outcome.progression;
    Ok(report)
}
