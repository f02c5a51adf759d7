use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Result};
use crate::se3::{ResidualAction, Vec3};
use crate::tasks::DmrConfig;

/// Smooth on/off perturbation process.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateConfig {
    pub beta: f64,
    pub p_on: f64,
    pub lo: f64,
    pub hi: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig::from(&DmrConfig::default())
    }
}

impl From<&DmrConfig> for GateConfig {
    fn from(d: &DmrConfig) -> Self {
        GateConfig { beta: d.beta, p_on: d.p_on, lo: d.eps_lo, hi: d.eps_hi }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) || !(0.0..=1.0).contains(&self.p_on) {
            return Err(invalid_arg("gate beta and p_on must lie in [0, 1]"));
        }
        if !(self.lo <= self.hi) {
            return Err(invalid_arg(format!("gate bounds [{}, {}] out of order", self.lo, self.hi)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GateState {
    pub m: f64,
}

/// Advance the gate `m ← βm + (1−β)b` with `b ~ Bernoulli(p_on)` and return
/// `m·ε` with `ε ~ U([lo, hi]^7)`.
pub fn gated_noise<R: Rng + ?Sized>(gate: &mut GateState, cfg: &GateConfig, rng: &mut R) -> ResidualAction {
    let b = if rng.random::<f64>() < cfg.p_on { 1.0 } else { 0.0 };
    gate.m = cfg.beta * gate.m + (1.0 - cfg.beta) * b;
    let mut eps = [0.0; 7];
    for e in &mut eps {
        *e = gate.m * (cfg.lo + (cfg.hi - cfg.lo) * rng.random::<f64>());
    }
    ResidualAction { dp: Vec3::new(eps[0], eps[1], eps[2]), dtheta: Vec3::new(eps[3], eps[4], eps[5]), du: eps[6] }
}
