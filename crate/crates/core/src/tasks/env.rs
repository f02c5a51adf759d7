use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::admittance::{self, AdmittanceGains, AdmittanceParams, AdmittanceState, TwistFilter, Wrench};
use crate::error::{invalid_arg, invalid_state, Result};
use crate::se3::{axis_angle_to_quat, wrap_angle, yaw_of, BaseAction, Pose, ResidualAction, Vec3};
use crate::tasks::contact::{contact_wrench, contacts, held_tip};
use crate::tasks::reward::{reward_terms, RewardConfig, RewardTerms};
use crate::tasks::{DmrConfig, TaskKind, TaskSpec};

/// Largest change of gripper openness per physics substep.
pub const GRIPPER_RATE: f64 = 0.25;
/// Low-pass blend of the finite-difference velocity estimate.
pub const TWIST_FILTER_COEFF: f64 = 0.5;
const GRAVITY: f64 = 9.81;

/// Nut-on-bolt thread engagement.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Engagement {
    /// Held-frame height where the thread caught.
    pub z0: f64,
    /// Held-part yaw at the last constraint projection.
    pub yaw: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Events {
    pub success: bool,
    pub drop: bool,
    pub force_violation: bool,
    pub timeout: bool,
}

impl Events {
    pub fn is_failure(&self) -> bool {
        self.drop || self.force_violation || self.timeout
    }

    pub fn any(&self) -> bool {
        self.success || self.is_failure()
    }

    pub fn names(&self) -> Vec<&'static str> {
        let mut v = Vec::new();
        if self.success {
            v.push("success");
        }
        if self.drop {
            v.push("drop");
        }
        if self.force_violation {
            v.push("force_violation");
        }
        if self.timeout {
            v.push("timeout");
        }
        v
    }

    pub fn from_names<'a>(names: impl IntoIterator<Item = &'a str>) -> Result<Events> {
        let mut e = Events::default();
        for n in names {
            match n {
                "success" => e.success = true,
                "drop" => e.drop = true,
                "force_violation" => e.force_violation = true,
                "timeout" => e.timeout = true,
                other => return Err(invalid_arg(format!("unknown event {other:?}"))),
            }
        }
        Ok(e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepResult {
    pub reward: f64,
    pub terms: RewardTerms,
    pub events: Events,
    pub done: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvState {
    pub ee: AdmittanceState,
    pub gripper: f64,
    pub held_pose: Pose,
    pub fixed_pose: Pose,
    pub attached: bool,
    /// `ee⁻¹ ∘ held`, frozen at grasp time.
    pub grasp: Pose,
    pub engaged: Option<Engagement>,
    /// Accumulated tightening rotation of the nut.
    pub cum_yaw: f64,
    pub step_count: u32,
    pub rng_seed: u64,
    /// Controller parameters after per-episode randomization.
    pub params: AdmittanceParams,
    /// Per-episode pose-estimation error added to observed object positions.
    pub obs_offset_fixed: Vec3,
    pub obs_offset_held: Vec3,
    pub twist: TwistFilter,
    pub prev_ee: Pose,
    /// Mean contact force magnitude over the last control step.
    pub contact_force: f64,
    /// Contact wrench at the last physics substep.
    pub wrench: Wrench,
    pub succeeded: bool,
    pub terminated: bool,
    pub ever_attached: bool,
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

fn normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    Normal::new(0.0, std).map(|d| d.sample(rng)).unwrap_or(0.0)
}

impl EnvState {
    /// Fresh episode. All randomness is consumed here; stepping is deterministic.
    pub fn reset(spec: &TaskSpec, gains: &AdmittanceGains, dmr: &DmrConfig, seed: u64) -> EnvState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (lo, hi) = (dmr.ctrl_scale_lo, dmr.ctrl_scale_hi);
        let k_x = uniform(&mut rng, lo, hi);
        let k_r = uniform(&mut rng, lo, hi);
        let m_x = uniform(&mut rng, lo, hi);
        let m_r = uniform(&mut rng, lo, hi);
        let params = gains.params().scaled(k_x, k_r, m_x, m_r);

        let dx = normal(&mut rng, dmr.init_pos_std);
        let dy = normal(&mut rng, dmr.init_pos_std);
        let yaw = normal(&mut rng, dmr.init_rot_std);
        let held_pose = Pose::new(
            spec.held_pose.p + Vec3::new(dx, dy, 0.0),
            axis_angle_to_quat(&Vec3::new(0.0, 0.0, yaw)) * spec.held_pose.q,
        );
        let mut offset = || Vec3::new(normal(&mut rng, dmr.pose_noise_std), normal(&mut rng, dmr.pose_noise_std), normal(&mut rng, dmr.pose_noise_std));
        let obs_offset_fixed = offset();
        let obs_offset_held = offset();

        EnvState {
            ee: AdmittanceState::at_rest(spec.init_ee),
            gripper: 1.0,
            held_pose,
            fixed_pose: spec.fixed_pose,
            attached: false,
            grasp: Pose::identity(),
            engaged: None,
            cum_yaw: 0.0,
            step_count: 0,
            rng_seed: seed,
            params,
            obs_offset_fixed,
            obs_offset_held,
            twist: TwistFilter::new(TWIST_FILTER_COEFF),
            prev_ee: spec.init_ee,
            contact_force: 0.0,
            wrench: Wrench::zero(),
            succeeded: false,
            terminated: false,
            ever_attached: false,
        }
    }

    pub fn success_condition(&self, spec: &TaskSpec) -> bool {
        match spec.kind {
            TaskKind::Peg | TaskKind::Gear => (self.held_pose.p - spec.success_pose.p).norm() < spec.success_tol,
            TaskKind::Nut => self.engaged.is_some() && self.cum_yaw >= spec.required_yaw,
        }
    }

    /// Task error used by the progression metric.
    pub fn task_error(&self, spec: &TaskSpec) -> f64 {
        match spec.kind {
            TaskKind::Peg | TaskKind::Gear => (self.held_pose.p - spec.success_pose.p).norm(),
            TaskKind::Nut => match self.engaged {
                Some(_) => (spec.required_yaw - self.cum_yaw).max(0.0),
                None => spec.e_max,
            },
        }
    }

    /// One control step: `substeps` admittance integrations toward `action`
    /// under the contact wrench, then event detection and reward.
    pub fn step(
        &mut self,
        spec: &TaskSpec,
        action: &BaseAction,
        prev_res: &ResidualAction,
        res: &ResidualAction,
        reward_cfg: &RewardConfig,
    ) -> Result<StepResult> {
        if self.terminated {
            return Err(invalid_state("episode already terminated; reset first"));
        }
        if !(-1.0..=1.0).contains(&action.gripper) || !action.pose.p.iter().all(|v| v.is_finite()) {
            return Err(invalid_arg(format!("invalid action {:?}", action.to_array())));
        }
        let dt = spec.dt();
        let mut events = Events::default();
        let mut force_sum = 0.0;
        for _ in 0..spec.substeps {
            self.update_gripper(spec, action.gripper, &mut events);
            let mut wrench = Wrench::zero();
            let mut force = 0.0;
            if self.attached && self.engaged.is_none() {
                let cs = contacts(spec, &self.held_pose, &self.fixed_pose);
                let cw = contact_wrench(spec, &cs, &self.ee.pose, &self.ee.linear_velocity(), &self.ee.angular_velocity());
                force = cw.force.norm();
                let axis = self.ee.pose.q * Vec3::z();
                let lateral = cw.force - axis * cw.force.dot(&axis);
                if lateral.norm() > spec.slip_force {
                    self.release(&mut events);
                } else {
                    let g = Vec3::new(0.0, 0.0, -spec.part_mass * GRAVITY);
                    let r = self.held_pose.transform_point(&spec.part_com) - self.ee.pose.p;
                    wrench = cw + Wrench { force: g, torque: r.cross(&g) };
                }
            }
            self.ee = admittance::step(&self.ee, &self.params, &wrench, &action.pose, dt)?;
            if self.attached {
                self.held_pose = self.ee.pose.compose(&self.grasp);
                if spec.kind == TaskKind::Nut {
                    force = force.max(self.thread_constraint(spec, &action.pose));
                }
            }
            self.wrench = wrench;
            force_sum += force;
        }

        self.contact_force = force_sum / spec.substeps as f64;
        if self.contact_force > spec.force_limit {
            events.force_violation = true;
        }
        let cur = self.ee.pose;
        admittance::estimate_twist(&self.prev_ee, &cur, spec.control_dt(), &mut self.twist)?;
        self.prev_ee = cur;
        self.step_count += 1;

        if !self.succeeded && self.success_condition(spec) {
            self.succeeded = true;
            events.success = true;
            // a release in the same step as completion is not a failure
            events.drop = false;
        }
        let finished = events.drop || events.force_violation || (events.success && spec.terminate_on_success);
        if !finished && self.step_count >= spec.timeout_steps {
            events.timeout = true;
        }
        self.terminated = finished || events.timeout;

        let terms = reward_terms(self, spec, prev_res, res, &events, reward_cfg);
        Ok(StepResult { reward: terms.weighted(reward_cfg), terms, events, done: self.terminated })
    }

    fn update_gripper(&mut self, spec: &TaskSpec, command: f64, events: &mut Events) {
        let before = self.gripper;
        self.gripper += (command - before).clamp(-GRIPPER_RATE, GRIPPER_RATE);
        if !self.attached {
            let closing = before >= 0.0 && self.gripper < 0.0;
            if closing && (self.ee.pose.p - self.held_pose.p).norm() < spec.capture_radius {
                self.attached = true;
                self.ever_attached = true;
                self.grasp = self.ee.pose.inverse().compose(&self.held_pose);
            }
        } else if self.gripper >= 0.0 {
            self.release(events);
        }
    }

    fn release(&mut self, events: &mut Events) {
        self.attached = false;
        if !self.succeeded {
            events.drop = true;
        }
    }

    /// Nut thread: engage when the bore clears the chamfer coaxially, then
    /// slave the held part to a screw joint driven by its yaw. Returns the
    /// constraint force magnitude.
    fn thread_constraint(&mut self, spec: &TaskSpec, reference: &Pose) -> f64 {
        let Some(eng) = self.engaged else {
            let tip = held_tip(spec, &self.held_pose);
            let depth = self.fixed_pose.p.z - tip.z;
            let rho = (tip.xy() - self.fixed_pose.p.xy()).norm();
            if depth >= spec.chamfer && rho + spec.part_radius <= spec.hole_radius {
                self.engaged = Some(Engagement { z0: self.held_pose.p.z, yaw: yaw_of(&self.held_pose.q) });
            }
            return 0.0;
        };
        let yaw = yaw_of(&self.held_pose.q);
        // tightening is clockwise seen from above
        let cum = self.cum_yaw - wrap_angle(yaw - eng.yaw);
        if cum < 0.0 {
            self.cum_yaw = 0.0;
            self.engaged = None;
            return 0.0;
        }
        self.cum_yaw = cum;
        self.engaged = Some(Engagement { yaw, ..eng });
        let held = Pose::new(
            Vec3::new(self.fixed_pose.p.x, self.fixed_pose.p.y, eng.z0 - spec.screw_pitch * cum),
            axis_angle_to_quat(&Vec3::new(0.0, 0.0, yaw)),
        );
        let ee = held.compose(&self.grasp.inverse());
        let w_z = self.ee.xi_dot[5];
        self.held_pose = held;
        self.ee.pose = ee;
        self.ee.xi_dot = [0.0, 0.0, spec.screw_pitch * w_z, 0.0, 0.0, w_z];
        let e = admittance::pose_error(&ee, reference);
        self.ee.xi = [ee.p.x, ee.p.y, ee.p.z, e[3], e[4], e[5]];
        self.params.stiffness[0] * (ee.p - reference.p).norm()
    }
}

/// Task progression `1 - clip(e, 0, e_max) / e_max`; exactly 1 once the
/// success condition has been met.
pub fn progression(state: &EnvState, spec: &TaskSpec) -> f64 {
    if state.succeeded || state.success_condition(spec) {
        return 1.0;
    }
    let e = state.task_error(spec).clamp(0.0, spec.e_max);
    1.0 - e / spec.e_max
}

/// Spec, configs and state bundled for convenience.
#[derive(Clone, Debug)]
pub struct Env {
    pub spec: TaskSpec,
    pub gains: AdmittanceGains,
    pub dmr: DmrConfig,
    pub reward: RewardConfig,
    pub state: EnvState,
}

impl Env {
    pub fn new(spec: TaskSpec, gains: AdmittanceGains, dmr: DmrConfig, reward: RewardConfig, seed: u64) -> Env {
        let state = EnvState::reset(&spec, &gains, &dmr, seed);
        Env { spec, gains, dmr, reward, state }
    }

    pub fn reset(&mut self, seed: u64) {
        self.state = EnvState::reset(&self.spec, &self.gains, &self.dmr, seed);
    }

    pub fn step(&mut self, action: &BaseAction, prev_res: &ResidualAction, res: &ResidualAction) -> Result<StepResult> {
        self.state.step(&self.spec, action, prev_res, res, &self.reward)
    }

    pub fn progression(&self) -> f64 {
        progression(&self.state, &self.spec)
    }
}
