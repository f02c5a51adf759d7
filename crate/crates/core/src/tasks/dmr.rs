use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Result};

/// Domain randomization ranges. Everything is sampled once per episode
/// except the base-action noise (`eps_*`, `beta`, `p_on`, chunk range), which
/// the pilots draw per step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DmrConfig {
    /// Multiplicative range applied independently to `K_x, K_r, M_x, M_r`.
    pub ctrl_scale_lo: f64,
    pub ctrl_scale_hi: f64,
    /// Std of the per-episode object position estimate error (fixed and held).
    pub pose_noise_std: f64,
    /// Std of the initial held-object placement, per planar axis.
    pub init_pos_std: f64,
    /// Std of the initial held-object yaw.
    pub init_rot_std: f64,
    pub chunk_min: usize,
    pub chunk_max: usize,
    pub eps_lo: f64,
    pub eps_hi: f64,
    pub beta: f64,
    pub p_on: f64,
}

impl Default for DmrConfig {
    fn default() -> Self {
        Self {
            ctrl_scale_lo: 0.95,
            ctrl_scale_hi: 1.05,
            pose_noise_std: 0.002,
            init_pos_std: 0.02,
            init_rot_std: 0.035,
            chunk_min: 5,
            chunk_max: 15,
            eps_lo: -0.6,
            eps_hi: 0.6,
            beta: 0.8,
            p_on: 0.5,
        }
    }
}

impl DmrConfig {
    /// No episode-level randomization at all.
    pub fn none() -> Self {
        Self {
            ctrl_scale_lo: 1.0,
            ctrl_scale_hi: 1.0,
            pose_noise_std: 0.0,
            init_pos_std: 0.0,
            init_rot_std: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.ctrl_scale_lo > 0.0
            && self.ctrl_scale_lo <= self.ctrl_scale_hi
            && self.pose_noise_std >= 0.0
            && self.init_pos_std >= 0.0
            && self.init_rot_std >= 0.0
            && self.chunk_min >= 1
            && self.chunk_min <= self.chunk_max
            && self.eps_lo <= self.eps_hi
            && (0.0..=1.0).contains(&self.beta)
            && (0.0..=1.0).contains(&self.p_on);
        if ok {
            Ok(())
        } else {
            Err(invalid_arg(format!("inconsistent DMR config {self:?}")))
        }
    }
}
