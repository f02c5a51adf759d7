use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Error, Result};
use crate::se3::{Pose, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Peg,
    Gear,
    Nut,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Peg, TaskKind::Gear, TaskKind::Nut];

    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::Peg => "peg",
            TaskKind::Gear => "gear",
            TaskKind::Nut => "nut",
        }
    }

    /// Progression saturation distance (meters) or angle (radians).
    pub fn default_e_max(&self) -> f64 {
        match self {
            TaskKind::Peg | TaskKind::Gear => 0.15,
            TaskKind::Nut => FRAC_PI_2,
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "peg" => Ok(TaskKind::Peg),
            "gear" => Ok(TaskKind::Gear),
            "nut" => Ok(TaskKind::Nut),
            other => Err(invalid_arg(format!("unknown task kind {other:?}"))),
        }
    }
}

/// Geometry and physics of one assembly task.
///
/// The fixed part's frame sits on its assembly axis at the top surface (hole
/// entrance for peg and gear, bolt tip for the nut). The held part's frame is
/// its grasp point; its bottom face lies `grip_offset` below along the part
/// axis. For peg and gear the held part is the pin entering a fixed bore; for
/// the nut the held part carries the bore and the fixed bolt is the pin.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Bore radius.
    pub hole_radius: f64,
    /// Pin radius.
    pub part_radius: f64,
    /// 45° chamfer width on the bore entrance.
    pub chamfer: f64,
    pub insertion_depth: f64,
    /// Axial advance per radian of tightening (nut only).
    pub screw_pitch: f64,
    /// Tightening rotation required for success (nut only).
    pub required_yaw: f64,
    /// Gear tooth count and allowed phase error at the mesh plane.
    pub n_teeth: u32,
    pub phase_tol: f64,
    /// Depth below the entrance where gear teeth start to interfere.
    pub mesh_depth: f64,
    /// Lateral reach of the fixed part's top face, measured from its axis.
    pub face_radius: f64,
    pub grip_offset: f64,
    pub fixed_pose: Pose,
    pub held_pose: Pose,
    pub init_ee: Pose,
    /// Held-part frame at completion.
    pub success_pose: Pose,
    pub success_tol: f64,
    pub e_max: f64,
    pub force_limit: f64,
    pub mu: f64,
    pub contact_stiffness: f64,
    pub part_mass: f64,
    /// Center of mass in the held-part frame.
    pub part_com: Vec3,
    pub capture_radius: f64,
    pub slip_force: f64,
    pub timeout_steps: u32,
    pub control_rate_hz: f64,
    pub substeps: u32,
    pub terminate_on_success: bool,
}

impl TaskSpec {
    pub fn peg() -> Self {
        let fixed = Pose::from_translation(Vec3::new(0.0, 0.0, 0.06));
        let grip_offset = 0.07;
        let depth = 0.05;
        Self {
            kind: TaskKind::Peg,
            hole_radius: 0.005,
            part_radius: 0.0045,
            chamfer: 0.0025,
            insertion_depth: depth,
            screw_pitch: 0.0,
            required_yaw: 0.0,
            n_teeth: 0,
            phase_tol: 0.0,
            mesh_depth: 0.0,
            face_radius: 0.04,
            grip_offset,
            fixed_pose: fixed,
            held_pose: Pose::from_translation(Vec3::new(0.12, 0.0, grip_offset)),
            init_ee: Pose::from_translation(Vec3::new(0.06, 0.0, 0.2)),
            success_pose: Pose::from_translation(fixed.p + Vec3::new(0.0, 0.0, grip_offset - depth)),
            success_tol: 0.0025,
            e_max: TaskKind::Peg.default_e_max(),
            force_limit: 40.0,
            mu: 0.2,
            contact_stiffness: 5000.0,
            part_mass: 0.02,
            part_com: Vec3::new(0.0, 0.0, -0.03),
            capture_radius: 0.005,
            slip_force: 30.0,
            timeout_steps: 450,
            control_rate_hz: 15.0,
            substeps: 8,
            terminate_on_success: true,
        }
    }

    pub fn gear() -> Self {
        let fixed = Pose::from_translation(Vec3::new(0.0, 0.0, 0.05));
        let grip_offset = 0.04;
        let depth = 0.03;
        Self {
            kind: TaskKind::Gear,
            hole_radius: 0.006,
            part_radius: 0.0055,
            insertion_depth: depth,
            n_teeth: 12,
            phase_tol: 0.05,
            mesh_depth: 0.008,
            grip_offset,
            fixed_pose: fixed,
            held_pose: Pose::from_translation(Vec3::new(0.12, 0.0, grip_offset)),
            success_pose: Pose::from_translation(fixed.p + Vec3::new(0.0, 0.0, grip_offset - depth)),
            e_max: TaskKind::Gear.default_e_max(),
            part_com: Vec3::new(0.0, 0.0, -0.02),
            ..Self::peg()
        }
    }

    pub fn nut() -> Self {
        let fixed = Pose::from_translation(Vec3::new(0.0, 0.0, 0.06));
        let grip_offset = 0.005;
        let chamfer = 0.0025;
        Self {
            kind: TaskKind::Nut,
            hole_radius: 0.0045,
            part_radius: 0.004,
            chamfer,
            insertion_depth: 0.04,
            screw_pitch: 0.0002,
            required_yaw: PI,
            face_radius: 0.012,
            grip_offset,
            fixed_pose: fixed,
            held_pose: Pose::from_translation(Vec3::new(0.12, 0.0, grip_offset)),
            success_pose: Pose::from_translation(fixed.p + Vec3::new(0.0, 0.0, grip_offset - chamfer)),
            e_max: TaskKind::Nut.default_e_max(),
            part_com: Vec3::zeros(),
            ..Self::peg()
        }
    }

    pub fn for_kind(kind: TaskKind) -> Self {
        match kind {
            TaskKind::Peg => Self::peg(),
            TaskKind::Gear => Self::gear(),
            TaskKind::Nut => Self::nut(),
        }
    }

    pub fn dt(&self) -> f64 {
        1.0 / (self.control_rate_hz * self.substeps as f64)
    }

    pub fn control_dt(&self) -> f64 {
        1.0 / self.control_rate_hz
    }

    pub fn clearance(&self) -> f64 {
        self.hole_radius - self.part_radius
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: &str| if ok { Ok(()) } else { Err(invalid_arg(format!("task {}: {msg}", self.kind))) };
        check(self.part_radius > 0.0 && self.part_radius < self.hole_radius, "need 0 < part_radius < hole_radius")?;
        check(self.e_max > 0.0, "e_max must be > 0")?;
        check(self.force_limit > 0.0, "force_limit must be > 0")?;
        check(self.chamfer >= 0.0 && self.insertion_depth > self.chamfer, "need 0 <= chamfer < insertion_depth")?;
        check(self.mu >= 0.0 && self.contact_stiffness > 0.0, "mu >= 0 and contact_stiffness > 0")?;
        check(self.control_rate_hz > 0.0 && self.substeps > 0, "control rate and substeps must be positive")?;
        check(self.timeout_steps > 0, "timeout_steps must be positive")?;
        check(self.success_tol > 0.0 && self.capture_radius > 0.0, "tolerances must be positive")?;
        if self.kind == TaskKind::Gear {
            check(self.n_teeth > 0 && self.phase_tol > 0.0, "gear needs n_teeth and phase_tol")?;
        }
        if self.kind == TaskKind::Nut {
            check(self.screw_pitch >= 0.0 && self.required_yaw > 0.0, "nut needs pitch >= 0 and required_yaw > 0")?;
        }
        Ok(())
    }
}
