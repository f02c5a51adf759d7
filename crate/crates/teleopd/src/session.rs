//! One teleoperation session: an environment stepped once per control tick
//! from the latest operator input, optionally corrected by a copilot.

use std::sync::Arc;

use anyhow::{anyhow, bail, ensure, Result};
use resco_core::copilot::Policy;
use resco_core::pilots::{DemoDataset, Episode, EpisodeOutcome, Pilot, PilotSpec, Record};
use resco_core::rollout::{env_seed, pilot_seed, EnvConfig};
use resco_core::se3::{axis_angle_to_quat, compose_residual, quat_from_wxyz, quat_to_axis_angle, quat_to_wxyz, BaseAction, Pose, ResidualAction, Vec3};
use resco_core::tasks::{observe_copilot, observe_state, Env, Events};

use crate::protocol::{event_names, ClientMsg, EeMsg, InputMsg, ObjectMsg, StateMsg};

/// Who produces the base action.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PilotSource {
    Human,
    /// The noise-free scripted pilot drives; operator input is ignored.
    Scripted,
}

#[derive(Clone)]
pub struct SessionConfig {
    pub env: EnvConfig,
    pub policy: Option<Arc<Policy>>,
    pub source: PilotSource,
    pub max_delta_pos: f64,
    pub max_delta_rot: f64,
}

struct EpisodeBuf {
    seed: u64,
    records: Vec<Record>,
    events: Vec<(u64, Events)>,
    steps: u64,
    /// Recording was on at some point during the episode.
    keep: bool,
    closed: bool,
}

pub struct Session {
    pub id: u64,
    cfg: SessionConfig,
    env: Env,
    scripted: Option<Box<dyn Pilot>>,
    target: BaseAction,
    mailbox: Option<InputMsg>,
    last_seq: Option<u64>,
    assist: bool,
    recording: bool,
    tick: u64,
    prev_res: ResidualAction,
    closed: bool,
    episode: EpisodeBuf,
    demos: DemoDataset,
}

fn clip_norm(v: Vec3, bound: f64) -> Vec3 {
    let n = v.norm();
    if n > bound {
        v * (bound / n)
    } else {
        v
    }
}

fn finite(xs: &[f64]) -> bool {
    xs.iter().all(|x| x.is_finite())
}

impl Session {
    pub fn new(id: u64, cfg: SessionConfig, seed: u64) -> Result<Session> {
        cfg.env.validate()?;
        ensure!(cfg.max_delta_pos > 0.0 && cfg.max_delta_rot > 0.0, "per-tick delta bounds must be positive");
        let scripted = match cfg.source {
            PilotSource::Scripted => Some(PilotSpec::expert().build(&cfg.env.scale)?),
            PilotSource::Human => None,
        };
        let mut demos = DemoDataset::new(cfg.env.spec.kind, format!("session-{id}"));
        demos.rate_hz = cfg.env.spec.control_rate_hz;
        let env = cfg.env.make_env();
        let target = BaseAction::new(env.state.ee.pose, env.state.gripper);
        let mut s = Session {
            id,
            cfg,
            env,
            scripted,
            target,
            mailbox: None,
            last_seq: None,
            assist: false,
            recording: false,
            tick: 0,
            prev_res: ResidualAction::zero(),
            closed: false,
            episode: EpisodeBuf { seed, records: Vec::new(), events: Vec::new(), steps: 0, keep: false, closed: true },
            demos,
        };
        s.reset(seed);
        Ok(s)
    }

    pub fn tick_count(&self) -> u64 {
        self.tick
    }

    pub fn assist_enabled(&self) -> bool {
        self.assist
    }

    pub fn recording(&self) -> bool {
        self.recording
    }

    pub fn seed(&self) -> u64 {
        self.episode.seed
    }

    pub fn env(&self) -> &Env {
        &self.env
    }

    pub fn target(&self) -> &BaseAction {
        &self.target
    }

    /// Episodes captured while recording, including finished ones only.
    pub fn demos(&self) -> &DemoDataset {
        &self.demos
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    fn reset(&mut self, seed: u64) {
        self.finish_episode();
        self.env.reset(env_seed(seed));
        if let Some(p) = self.scripted.as_mut() {
            p.reset(pilot_seed(seed));
        }
        self.target = BaseAction::new(self.env.state.ee.pose, self.env.state.gripper);
        self.prev_res = ResidualAction::zero();
        self.mailbox = None;
        self.episode = EpisodeBuf { seed, records: Vec::new(), events: Vec::new(), steps: 0, keep: self.recording, closed: false };
    }

    /// Close the current episode, keeping it when recording touched it.
    fn finish_episode(&mut self) {
        if self.episode.closed {
            return;
        }
        self.episode.closed = true;
        if !self.episode.keep || self.episode.records.is_empty() {
            return;
        }
        let id = self.demos.episodes.len() as u64;
        self.demos.episodes.push(Episode {
            id,
            records: std::mem::take(&mut self.episode.records),
            outcome: Some(EpisodeOutcome {
                seed: self.episode.seed,
                success: self.env.state.succeeded,
                steps: self.episode.steps,
                progression: self.env.progression(),
                events: std::mem::take(&mut self.episode.events),
            }),
        });
    }

    /// Deliver a client message. Inputs go to a latest-wins mailbox that the
    /// next tick consumes; a repeated or stale sequence number is ignored.
    pub fn submit(&mut self, msg: ClientMsg) -> Result<()> {
        ensure!(!self.closed, "session {} is closed", self.id);
        match msg {
            ClientMsg::Input(input) => {
                if self.last_seq.is_some_and(|s| input.seq <= s) {
                    return Ok(());
                }
                validate_input(&input)?;
                self.last_seq = Some(input.seq);
                self.mailbox = Some(input);
            }
            ClientMsg::Assist { enabled } => {
                if enabled && self.cfg.policy.is_none() {
                    bail!("no copilot checkpoint is loaded");
                }
                self.assist = enabled;
            }
            ClientMsg::Record { enabled } => {
                self.recording = enabled;
                if enabled {
                    self.episode.keep = true;
                }
            }
            ClientMsg::Reset { seed } => self.reset(seed),
        }
        Ok(())
    }

    fn integrate(&mut self, input: &InputMsg) {
        let (dp, drot) = match (input.dp, input.drot, input.p, input.q) {
            (Some(dp), Some(dr), _, _) => (Vec3::from(dp), Vec3::from(dr)),
            (_, _, Some(p), Some(q)) => {
                let q = quat_from_wxyz(q[0], q[1], q[2], q[3]);
                (Vec3::from(p) - self.target.pose.p, quat_to_axis_angle(&(q * self.target.pose.q.inverse())))
            }
            _ => unreachable!("validated on submit"),
        };
        let dp = clip_norm(dp, self.cfg.max_delta_pos);
        let drot = clip_norm(drot, self.cfg.max_delta_rot);
        let pose = Pose::new(self.target.pose.p + dp, axis_angle_to_quat(&drot) * self.target.pose.q);
        self.target = BaseAction::new(pose, input.grip);
    }

    /// Advance one control tick and report the resulting state. Finished
    /// episodes are held until the next reset.
    pub fn tick(&mut self) -> Result<StateMsg> {
        ensure!(!self.closed, "session {} is closed", self.id);
        self.tick += 1;
        let mut reward = 0.0;
        let mut events = Events::default();
        if !self.env.state.terminated {
            let base = match self.scripted.as_mut() {
                Some(p) => p.act(&self.env.state, &self.env.spec)?,
                None => {
                    if let Some(input) = self.mailbox.take() {
                        self.integrate(&input);
                    }
                    self.target
                }
            };
            let (res, action) = match (&self.cfg.policy, self.assist) {
                (Some(p), true) => {
                    let res = p.mean_action(&observe_copilot(&self.env.state, &base, &self.prev_res))?;
                    (res, compose_residual(&base, &res, &self.cfg.env.scale))
                }
                _ => (ResidualAction::zero(), base),
            };
            self.episode.records.push(Record { t: self.episode.steps, state: observe_state(&self.env.state), action: base, assisted: self.assist });
            let out = self.env.step(&action, &self.prev_res, &res)?;
            self.prev_res = res;
            self.episode.steps += 1;
            if out.events.any() {
                self.episode.events.push((self.episode.steps, out.events));
            }
            reward = out.reward;
            events = out.events;
            if out.done {
                self.finish_episode();
            }
        }
        Ok(self.snapshot(reward, &events))
    }

    fn snapshot(&self, reward: f64, events: &Events) -> StateMsg {
        let s = &self.env.state;
        let ee = s.ee.pose;
        let w = s.wrench;
        StateMsg {
            tick: self.tick,
            ee: EeMsg { p: [ee.p.x, ee.p.y, ee.p.z], q: quat_to_wxyz(&ee.q), gripper: s.gripper },
            objects: vec![ObjectMsg::new("held", &s.held_pose, s.attached), ObjectMsg::new("fixed", &s.fixed_pose, false)],
            wrench: [w.force.x, w.force.y, w.force.z, w.torque.x, w.torque.y, w.torque.z],
            progression: self.env.progression(),
            reward,
            events: event_names(events),
            assist: self.assist,
        }
    }

    /// End the session. The recorded demonstrations are returned; further
    /// messages and ticks are rejected.
    pub fn close(&mut self) -> DemoDataset {
        if !self.closed {
            self.finish_episode();
            self.closed = true;
        }
        self.demos.clone()
    }
}

fn validate_input(m: &InputMsg) -> Result<()> {
    ensure!(m.grip.is_finite() && (-1.0..=1.0).contains(&m.grip), "grip {} outside [-1, 1]", m.grip);
    match (m.dp, m.drot, m.p, m.q) {
        (Some(dp), Some(dr), None, None) => ensure!(finite(&dp) && finite(&dr), "non-finite delta"),
        (None, None, Some(p), Some(q)) => {
            ensure!(finite(&p) && finite(&q), "non-finite pose");
            let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            ensure!(n > 1e-9, "zero quaternion");
        }
        _ => return Err(anyhow!("input needs either dp and drot, or p and q")),
    }
    Ok(())
}
