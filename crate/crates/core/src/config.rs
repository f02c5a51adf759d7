//! Workbench configuration file (TOML). Every section is optional and falls
//! back to the built-in defaults; unknown keys are rejected.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::admittance::AdmittanceGains;
use crate::copilot::PpoConfig;
use crate::error::{Error, Result};
use crate::harness::Aggregation;
use crate::pilots::{BcConfig, KnnConfig};
use crate::rollout::EnvConfig;
use crate::se3::{ResidualScale, Vec3};
use crate::tasks::{DmrConfig, RewardConfig, TaskKind, TaskSpec};

/// Upper bound on a positional `e_max` (meters) accepted for peg and gear.
pub const MAX_DISTANCE_E_MAX: f64 = 0.5;

/// Optional per-task geometry and physics overrides.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskOverrides {
    pub hole_radius: Option<f64>,
    pub part_radius: Option<f64>,
    pub chamfer: Option<f64>,
    pub insertion_depth: Option<f64>,
    pub screw_pitch: Option<f64>,
    pub required_yaw: Option<f64>,
    pub n_teeth: Option<u32>,
    pub phase_tol: Option<f64>,
    pub success_tol: Option<f64>,
    pub e_max: Option<f64>,
    pub force_limit: Option<f64>,
    pub mu: Option<f64>,
    pub contact_stiffness: Option<f64>,
    pub part_mass: Option<f64>,
    pub part_com: Option<[f64; 3]>,
    pub capture_radius: Option<f64>,
    pub slip_force: Option<f64>,
    pub timeout_steps: Option<u32>,
}

impl TaskOverrides {
    pub fn apply(&self, mut s: TaskSpec) -> TaskSpec {
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { s.$f = v; } )* };
        }
        set!(
            hole_radius, part_radius, chamfer, insertion_depth, screw_pitch, required_yaw, n_teeth, phase_tol, success_tol, e_max,
            force_limit, mu, contact_stiffness, part_mass, capture_radius, slip_force, timeout_steps
        );
        if let Some([x, y, z]) = self.part_com {
            s.part_com = Vec3::new(x, y, z);
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSection {
    /// Task used by commands that operate on a single task.
    pub kind: TaskKind,
    pub peg: TaskOverrides,
    pub gear: TaskOverrides,
    pub nut: TaskOverrides,
}

impl Default for TaskSection {
    fn default() -> Self {
        TaskSection { kind: TaskKind::Peg, peg: TaskOverrides::default(), gear: TaskOverrides::default(), nut: TaskOverrides::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub port: u16,
    pub control_rate_hz: f64,
    pub max_sessions: usize,
    /// Per-tick bound on the integrated target translation (m).
    pub max_delta_pos: f64,
    /// Per-tick bound on the integrated target rotation (rad).
    pub max_delta_rot: f64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig { port: 8765, control_rate_hz: 15.0, max_sessions: 8, max_delta_pos: 0.01, max_delta_rot: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes: usize,
    pub aggregation: Aggregation,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { episodes: 200, aggregation: Aggregation::Final }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkbenchConfig {
    pub task: TaskSection,
    pub admittance: AdmittanceGains,
    pub dmr: DmrConfig,
    pub reward: RewardConfig,
    pub residual: ResidualScale,
    pub knn: KnnConfig,
    pub bc: BcConfig,
    pub ppo: PpoConfig,
    pub eval: EvalConfig,
    pub service: ServiceConfig,
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl WorkbenchConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: WorkbenchConfig = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is always representable")
    }

    pub fn overrides(&self, kind: TaskKind) -> &TaskOverrides {
        match kind {
            TaskKind::Peg => &self.task.peg,
            TaskKind::Gear => &self.task.gear,
            TaskKind::Nut => &self.task.nut,
        }
    }

    pub fn task_spec(&self, kind: TaskKind) -> TaskSpec {
        self.overrides(kind).apply(TaskSpec::for_kind(kind))
    }

    pub fn env_config(&self, kind: TaskKind) -> EnvConfig {
        EnvConfig { spec: self.task_spec(kind), gains: self.admittance, dmr: self.dmr, reward: self.reward, scale: self.residual }
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| config_err(e.to_string());
        for kind in TaskKind::ALL {
            let spec = self.task_spec(kind);
            spec.validate().map_err(wrap)?;
            let ok = match kind {
                TaskKind::Peg | TaskKind::Gear => spec.e_max <= MAX_DISTANCE_E_MAX,
                TaskKind::Nut => spec.e_max <= PI,
            };
            if !ok {
                let unit = if kind == TaskKind::Nut { "an angle of at most pi rad" } else { "a distance of at most 0.5 m" };
                return Err(config_err(format!("task.{kind}.e_max = {} must be {unit}", spec.e_max)));
            }
            if (spec.control_rate_hz - self.service.control_rate_hz).abs() > 1e-9 {
                return Err(config_err(format!(
                    "service.control_rate_hz = {} disagrees with the task control rate {}",
                    self.service.control_rate_hz, spec.control_rate_hz
                )));
            }
        }
        self.admittance.params().validate().map_err(wrap)?;
        self.dmr.validate().map_err(wrap)?;
        self.reward.validate().map_err(wrap)?;
        self.residual.validate().map_err(wrap)?;
        self.knn.validate().map_err(wrap)?;
        self.ppo.validate().map_err(wrap)?;
        if self.knn.chunk_min != self.dmr.chunk_min || self.knn.chunk_max != self.dmr.chunk_max {
            return Err(config_err("knn chunk range must match the dmr chunk range"));
        }
        if self.eval.episodes == 0 {
            return Err(config_err("eval.episodes must be >= 1"));
        }
        if self.service.max_sessions == 0 || !(self.service.max_delta_pos > 0.0) || !(self.service.max_delta_rot > 0.0) {
            return Err(config_err("service needs max_sessions >= 1 and positive delta bounds"));
        }
        Ok(())
    }
}
