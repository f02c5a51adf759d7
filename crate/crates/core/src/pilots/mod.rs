//! Base pilots: the scripted oracle, the kNN human surrogate, a BC regressor
//! and the laggy/noisy perturbation wrappers, plus the demonstration data
//! they share.

pub mod artifact;
pub mod bc;
pub mod dataset;
pub mod knn;
pub mod noise;
pub mod scripted;
pub mod wrappers;

use std::fmt;
use std::sync::Arc;

use crate::error::Result;
use crate::se3::{BaseAction, ResidualScale};
use crate::tasks::{EnvState, TaskSpec};

pub use artifact::PilotArtifact;
pub use bc::{decode_target, encode_target, fit_bc, BcConfig, BcFit, BcModel, BcOptimizer, BcPilot, TARGET_DIM};
pub use dataset::{DemoDataset, Episode, EpisodeOutcome, Record};
pub use knn::{action_distance, default_grid, fit_weights, KnnConfig, KnnIndex, KnnPilot, WeightFit, Weights};
pub use noise::{gated_noise, GateConfig, GateState};
pub use scripted::{NoiseProfile, Phase, ScriptedPilot};
pub use wrappers::{Laggy, Noisy};

/// Source of base actions. One instance drives one episode at a time.
pub trait Pilot: Send {
    fn name(&self) -> &str;
    /// Start a new episode with its own random stream.
    fn reset(&mut self, seed: u64);
    fn act(&mut self, state: &EnvState, spec: &TaskSpec) -> Result<BaseAction>;
}

/// Repeat probability of the laggy baseline.
pub const LAGGY_P_REPEAT: f64 = 0.8;

/// Recipe for building pilots; cheap to clone and shareable across threads.
#[derive(Clone)]
pub enum PilotSpec {
    Scripted(NoiseProfile),
    Knn { index: Arc<KnnIndex>, cfg: KnnConfig },
    Bc(Arc<BcModel>),
    Laggy { inner: Box<PilotSpec>, p_repeat: f64 },
    Noisy { inner: Box<PilotSpec>, gate: GateConfig },
}

impl PilotSpec {
    pub fn expert() -> Self {
        PilotSpec::Scripted(NoiseProfile::NONE)
    }

    pub fn novice() -> Self {
        PilotSpec::Scripted(NoiseProfile::NOVICE)
    }

    pub fn laggy(inner: PilotSpec) -> Self {
        PilotSpec::Laggy { inner: Box::new(inner), p_repeat: LAGGY_P_REPEAT }
    }

    pub fn noisy(inner: PilotSpec, gate: GateConfig) -> Self {
        PilotSpec::Noisy { inner: Box::new(inner), gate }
    }

    pub fn build(&self, scale: &ResidualScale) -> Result<Box<dyn Pilot>> {
        Ok(match self {
            PilotSpec::Scripted(p) => {
                p.validate()?;
                Box::new(ScriptedPilot::new(*p))
            }
            PilotSpec::Knn { index, cfg } => Box::new(KnnPilot::new(index.clone(), *cfg, *scale)?),
            PilotSpec::Bc(m) => Box::new(BcPilot::new(m.clone())),
            PilotSpec::Laggy { inner, p_repeat } => Box::new(Laggy::new(inner.build(scale)?, *p_repeat)?),
            PilotSpec::Noisy { inner, gate } => Box::new(Noisy::new(inner.build(scale)?, *gate, *scale)?),
        })
    }
}

impl fmt::Display for PilotSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PilotSpec::Scripted(p) if p.is_zero() => f.write_str("expert"),
            PilotSpec::Scripted(p) if *p == NoiseProfile::NOVICE => f.write_str("novice"),
            PilotSpec::Scripted(_) => f.write_str("scripted"),
            PilotSpec::Knn { .. } => f.write_str("knn"),
            PilotSpec::Bc(_) => f.write_str("bc"),
            PilotSpec::Laggy { inner, .. } if matches!(**inner, PilotSpec::Scripted(p) if p.is_zero()) => f.write_str("laggy"),
            PilotSpec::Noisy { inner, .. } if matches!(**inner, PilotSpec::Scripted(p) if p.is_zero()) => f.write_str("noisy"),
            PilotSpec::Laggy { inner, .. } => write!(f, "laggy-{inner}"),
            PilotSpec::Noisy { inner, .. } => write!(f, "noisy-{inner}"),
        }
    }
}

impl fmt::Debug for PilotSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PilotSpec({self})")
    }
}
