//! Waypoint-following oracle pilot with an optional human-like error profile.
//!
//! The script reads true object poses. Its error profile adds a grasp-point
//! bias and an alignment bias (both fixed for the episode) plus per-step
//! jitter on the emitted target.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Result};
use crate::pilots::Pilot;
use crate::se3::{axis_angle_to_quat, geodesic, BaseAction, Pose, Vec3};
use crate::tasks::contact::gear_phase;
use crate::tasks::{EnvState, TaskKind, TaskSpec};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseProfile {
    /// Std of the planar grasp-point error, per axis (m).
    pub grasp_bias_std: f64,
    /// Std of the planar alignment error over the fixed part, per axis (m).
    pub align_bias_std: f64,
    /// Std of the per-step target jitter, per axis (m).
    pub jitter_std: f64,
}

impl Default for NoiseProfile {
    fn default() -> Self {
        NoiseProfile::NONE
    }
}

impl NoiseProfile {
    pub const NONE: NoiseProfile = NoiseProfile { grasp_bias_std: 0.0, align_bias_std: 0.0, jitter_std: 0.0 };

    /// Error profile of an unskilled operator.
    pub const NOVICE: NoiseProfile = NoiseProfile { grasp_bias_std: 0.0045, align_bias_std: 0.004, jitter_std: 0.0005 };

    pub fn validate(&self) -> Result<()> {
        if [self.grasp_bias_std, self.align_bias_std, self.jitter_std].iter().all(|s| *s >= 0.0) {
            Ok(())
        } else {
            Err(invalid_arg(format!("noise profile stds must be >= 0: {self:?}")))
        }
    }

    pub fn is_zero(&self) -> bool {
        *self == NoiseProfile::NONE
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    PreGrasp,
    Descend,
    Close,
    Lift,
    Transport,
    Align,
    Insert,
    Turn,
}

/// Height of the pre-grasp point above the grasp point.
pub const APPROACH_HEIGHT: f64 = 0.04;
/// Clearance of the held part's bottom above the fixed part while carrying.
pub const CARRY_CLEARANCE: f64 = 0.03;
/// Clearance of the held part's bottom above the entrance before inserting.
pub const HOVER_CLEARANCE: f64 = 0.004;
/// Commanded overshoot below the final seat while inserting.
pub const PUSH_DEPTH: f64 = 0.01;
/// Translation and rotation rate limits on the commanded target, per step.
pub const MAX_STEP: f64 = 0.1 / 15.0;
pub const MAX_ROT_STEP: f64 = 0.2;
/// Yaw lead commanded while turning the nut (clockwise).
pub const TURN_LEAD: f64 = 0.25;
/// Steps the command must rest on a waypoint before the next phase starts.
pub const SETTLE_STEPS: u32 = 5;
/// Distance within which the command counts as resting on its waypoint.
pub const ARRIVE_TOL: f64 = 5e-4;

pub struct ScriptedPilot {
    profile: NoiseProfile,
    rng: ChaCha8Rng,
    phase: Phase,
    wait: u32,
    dwell: u32,
    lift_from: Vec3,
    command: Option<Pose>,
    grasp_bias: Vec3,
    align_bias: Vec3,
    name: String,
}

fn planar(rng: &mut ChaCha8Rng, std: f64) -> Vec3 {
    match Normal::new(0.0, std) {
        Ok(d) if std > 0.0 => Vec3::new(d.sample(rng), d.sample(rng), 0.0),
        _ => Vec3::zeros(),
    }
}

/// Move `from` toward `to` by at most `MAX_STEP` and `MAX_ROT_STEP`.
fn rate_limit(from: &Pose, to: &Pose) -> Pose {
    let d = to.p - from.p;
    let n = d.norm();
    let p = if n > MAX_STEP { from.p + d * (MAX_STEP / n) } else { to.p };
    let ang = geodesic(&from.q, &to.q);
    let q = if ang > MAX_ROT_STEP { from.q.slerp(&to.q, MAX_ROT_STEP / ang) } else { to.q };
    Pose::new(p, q)
}

impl ScriptedPilot {
    pub fn new(profile: NoiseProfile) -> Self {
        let name = if profile.is_zero() { "expert" } else { "scripted-noisy" };
        ScriptedPilot {
            profile,
            rng: ChaCha8Rng::seed_from_u64(0),
            phase: Phase::PreGrasp,
            wait: 0,
            dwell: 0,
            lift_from: Vec3::zeros(),
            command: None,
            grasp_bias: Vec3::zeros(),
            align_bias: Vec3::zeros(),
            name: name.into(),
        }
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn profile(&self) -> &NoiseProfile {
        &self.profile
    }

    /// Whether the previous command sat on `goal` for `SETTLE_STEPS` steps.
    /// Completion is judged on the command rather than the measured pose so
    /// that an assisting correction cannot stall the script.
    fn arrived(&mut self, goal: &Pose) -> bool {
        let on_goal = self.command.is_some_and(|c| (c.p - goal.p).norm() < ARRIVE_TOL && geodesic(&c.q, &goal.q) < 1e-3);
        self.dwell = if on_goal { self.dwell + 1 } else { 0 };
        self.dwell >= SETTLE_STEPS
    }

    fn advance(&mut self, phase: Phase) {
        self.phase = phase;
        self.dwell = 0;
    }

    /// Waypoint for the current phase as `(ee goal, gripper)`, advancing the
    /// phase when the previous waypoint has been reached.
    fn goal(&mut self, state: &EnvState, spec: &TaskSpec) -> (Pose, f64) {
        let ee = state.ee.pose;
        let held = state.held_pose;
        let fixed = state.fixed_pose;
        let grasp_pt = held.p + self.grasp_bias;
        let carry_z = fixed.p.z + spec.grip_offset + CARRY_CLEARANCE;
        let over_hole = Vec3::new(fixed.p.x, fixed.p.y, 0.0) + self.align_bias;
        // ee target that puts the held frame at `h`
        let follow = |h: Vec3| h + (ee.p - held.p);
        let q_keep = self.command.map_or(ee.q, |c| c.q);

        loop {
            match self.phase {
                Phase::PreGrasp => {
                    let goal = Pose::new(grasp_pt + Vec3::new(0.0, 0.0, APPROACH_HEIGHT), q_keep);
                    if self.arrived(&goal) && state.gripper > 0.0 {
                        self.advance(Phase::Descend);
                        continue;
                    }
                    return (goal, 1.0);
                }
                Phase::Descend => {
                    let goal = Pose::new(grasp_pt, q_keep);
                    if self.arrived(&goal) {
                        self.advance(Phase::Close);
                        self.wait = 0;
                        continue;
                    }
                    return (goal, 1.0);
                }
                Phase::Close => {
                    if state.attached {
                        self.lift_from = held.p;
                        self.advance(Phase::Lift);
                        continue;
                    }
                    if self.wait >= 2 {
                        self.advance(Phase::PreGrasp);
                        return (Pose::new(grasp_pt, q_keep), 1.0);
                    }
                    self.wait += 1;
                    return (Pose::new(grasp_pt, q_keep), -1.0);
                }
                Phase::Lift => {
                    let goal = Pose::new(follow(Vec3::new(self.lift_from.x, self.lift_from.y, carry_z)), q_keep);
                    if self.arrived(&goal) {
                        self.advance(Phase::Transport);
                        continue;
                    }
                    return (goal, -1.0);
                }
                Phase::Transport | Phase::Align => {
                    let z = if self.phase == Phase::Transport { carry_z } else { fixed.p.z + spec.grip_offset + HOVER_CLEARANCE };
                    let h = over_hole + Vec3::new(0.0, 0.0, z);
                    let q = match spec.kind {
                        TaskKind::Gear => axis_angle_to_quat(&Vec3::new(0.0, 0.0, -gear_phase(spec, &held, &fixed))) * ee.q,
                        _ => q_keep,
                    };
                    let phase_ok = spec.kind != TaskKind::Gear || gear_phase(spec, &held, &fixed).abs() < 0.5 * spec.phase_tol;
                    let goal = Pose::new(follow(h), q);
                    if self.arrived(&goal) && phase_ok {
                        self.advance(if self.phase == Phase::Transport { Phase::Align } else { Phase::Insert });
                        continue;
                    }
                    return (goal, -1.0);
                }
                Phase::Insert => {
                    if spec.kind == TaskKind::Nut && state.engaged.is_some() {
                        self.advance(Phase::Turn);
                        continue;
                    }
                    let z = match spec.kind {
                        TaskKind::Nut => fixed.p.z + spec.grip_offset - spec.chamfer - 0.003,
                        _ => spec.success_pose.p.z - PUSH_DEPTH,
                    };
                    let h = over_hole + Vec3::new(0.0, 0.0, z);
                    let q = match spec.kind {
                        TaskKind::Gear => axis_angle_to_quat(&Vec3::new(0.0, 0.0, -gear_phase(spec, &held, &fixed))) * ee.q,
                        _ => q_keep,
                    };
                    return (Pose::new(follow(h), q), -1.0);
                }
                Phase::Turn => {
                    let h = Vec3::new(fixed.p.x, fixed.p.y, held.p.z - 0.002);
                    let q = axis_angle_to_quat(&Vec3::new(0.0, 0.0, -TURN_LEAD)) * ee.q;
                    return (Pose::new(follow(h), q), -1.0);
                }
            }
        }
    }
}

impl Pilot for ScriptedPilot {
    fn name(&self) -> &str {
        &self.name
    }

    fn reset(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.phase = Phase::PreGrasp;
        self.wait = 0;
        self.dwell = 0;
        self.command = None;
        self.grasp_bias = planar(&mut self.rng, self.profile.grasp_bias_std);
        self.align_bias = planar(&mut self.rng, self.profile.align_bias_std);
    }

    fn act(&mut self, state: &EnvState, spec: &TaskSpec) -> Result<BaseAction> {
        let (goal, grip) = self.goal(state, spec);
        let from = self.command.unwrap_or(state.ee.pose);
        let cmd = rate_limit(&from, &goal);
        self.command = Some(cmd);
        let jitter = match Normal::new(0.0, self.profile.jitter_std) {
            Ok(d) if self.profile.jitter_std > 0.0 => Vec3::new(d.sample(&mut self.rng), d.sample(&mut self.rng), d.sample(&mut self.rng)),
            _ => Vec3::zeros(),
        };
        Ok(BaseAction::new(Pose::new(cmd.p + jitter, cmd.q), grip))
    }
}

