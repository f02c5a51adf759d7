use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Result};
use crate::se3::{tilt_of, ResidualAction};
use crate::tasks::{EnvState, Events, TaskSpec};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub regularization: f64,
    pub tilt: f64,
    pub force: f64,
    pub axis_align: f64,
    pub smoothness: f64,
    pub termination: f64,
    pub success: f64,
    /// Radius of the axis-align indicator (meters).
    pub align_radius: f64,
    /// Contact force at which the force penalty saturates (N).
    pub force_clip: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            regularization: 0.1,
            tilt: 1.0,
            force: 0.2,
            axis_align: 0.05,
            smoothness: 0.1,
            termination: 50.0,
            success: 30.0,
            align_radius: 0.005,
            force_clip: 20.0,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        let scales = [
            self.regularization,
            self.tilt,
            self.force,
            self.axis_align,
            self.smoothness,
            self.termination,
            self.success,
        ];
        if scales.iter().any(|s| !(*s >= 0.0)) || !(self.align_radius > 0.0) || !(self.force_clip > 0.0) {
            return Err(invalid_arg(format!("invalid reward config {self:?}")));
        }
        Ok(())
    }
}

/// Unscaled reward terms, signed as they enter the sum.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RewardTerms {
    pub regularization: f64,
    pub tilt: f64,
    pub force: f64,
    pub axis_align: f64,
    pub smoothness: f64,
    pub termination: f64,
    pub success: f64,
}

impl RewardTerms {
    pub fn weighted(&self, cfg: &RewardConfig) -> f64 {
        cfg.regularization * self.regularization
            + cfg.tilt * self.tilt
            + cfg.force * self.force
            + cfg.axis_align * self.axis_align
            + cfg.smoothness * self.smoothness
            + cfg.termination * self.termination
            + cfg.success * self.success
    }
}

/// `φ(F)`: contact force normalized by the clip bound, saturating at 1.
pub fn force_penalty(force: f64, clip: f64) -> f64 {
    force.min(clip) / clip
}

pub fn reward_terms(
    state: &EnvState,
    spec: &TaskSpec,
    prev_res: &ResidualAction,
    res: &ResidualAction,
    events: &Events,
    cfg: &RewardConfig,
) -> RewardTerms {
    let target = spec.success_pose.p.xy();
    let planar = (state.held_pose.p.xy() - target).norm();
    let diff: f64 = prev_res
        .to_array()
        .iter()
        .zip(res.to_array())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    RewardTerms {
        regularization: -res.norm(),
        tilt: -tilt_of(&state.ee.pose.q),
        force: -force_penalty(state.contact_force, cfg.force_clip),
        axis_align: if planar < cfg.align_radius { 1.0 } else { 0.0 },
        smoothness: -diff,
        termination: if events.is_failure() { -1.0 } else { 0.0 },
        success: if events.success { 1.0 } else { 0.0 },
    }
}

/// Weighted reward for the transition that produced `state` and `events`.
/// `events.success` is only ever raised on the first success of an episode.
pub fn compute_reward(
    state: &EnvState,
    spec: &TaskSpec,
    prev_res: &ResidualAction,
    res: &ResidualAction,
    events: &Events,
    cfg: &RewardConfig,
) -> f64 {
    reward_terms(state, spec, prev_res, res, events, cfg).weighted(cfg)
}
