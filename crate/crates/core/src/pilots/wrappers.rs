use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid_arg, Result};
use crate::pilots::noise::{gated_noise, GateConfig, GateState};
use crate::pilots::Pilot;
use crate::seeds::mix;
use crate::se3::{compose_residual, BaseAction, ResidualScale};
use crate::tasks::{EnvState, TaskSpec};

const LAG_STREAM: u64 = 0x4c41_4747;
const NOISE_STREAM: u64 = 0x4e4f_4953;

/// Re-emits its previous output with probability `p_repeat`.
pub struct Laggy {
    inner: Box<dyn Pilot>,
    p_repeat: f64,
    rng: ChaCha8Rng,
    last: Option<BaseAction>,
    pub repeats: u64,
    name: String,
}

impl Laggy {
    pub fn new(inner: Box<dyn Pilot>, p_repeat: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p_repeat) {
            return Err(invalid_arg(format!("p_repeat {p_repeat} outside [0, 1]")));
        }
        let name = format!("laggy({})", inner.name());
        Ok(Laggy { inner, p_repeat, rng: ChaCha8Rng::seed_from_u64(0), last: None, repeats: 0, name })
    }
}

impl Pilot for Laggy {
    fn name(&self) -> &str {
        &self.name
    }

    fn reset(&mut self, seed: u64) {
        self.inner.reset(seed);
        self.rng = ChaCha8Rng::seed_from_u64(mix(seed, LAG_STREAM));
        self.last = None;
        self.repeats = 0;
    }

    fn act(&mut self, state: &EnvState, spec: &TaskSpec) -> Result<BaseAction> {
        // the inner pilot keeps running so its own state stays current
        let fresh = self.inner.act(state, spec)?;
        let repeat = self.rng.random::<f64>() < self.p_repeat;
        let out = match self.last {
            Some(prev) if repeat => {
                self.repeats += 1;
                prev
            }
            _ => fresh,
        };
        self.last = Some(out);
        Ok(out)
    }
}

/// Composes the inner pilot's command with gated noise.
pub struct Noisy {
    inner: Box<dyn Pilot>,
    cfg: GateConfig,
    scale: ResidualScale,
    gate: GateState,
    rng: ChaCha8Rng,
    name: String,
}

impl Noisy {
    pub fn new(inner: Box<dyn Pilot>, cfg: GateConfig, scale: ResidualScale) -> Result<Self> {
        cfg.validate()?;
        let name = format!("noisy({})", inner.name());
        Ok(Noisy { inner, cfg, scale, gate: GateState::default(), rng: ChaCha8Rng::seed_from_u64(0), name })
    }
}

impl Pilot for Noisy {
    fn name(&self) -> &str {
        &self.name
    }

    fn reset(&mut self, seed: u64) {
        self.inner.reset(seed);
        self.rng = ChaCha8Rng::seed_from_u64(mix(seed, NOISE_STREAM));
        self.gate = GateState::default();
    }

    fn act(&mut self, state: &EnvState, spec: &TaskSpec) -> Result<BaseAction> {
        let a = self.inner.act(state, spec)?;
        let d = gated_noise(&mut self.gate, &self.cfg, &mut self.rng);
        Ok(compose_residual(&a, &d, &self.scale))
    }
}
