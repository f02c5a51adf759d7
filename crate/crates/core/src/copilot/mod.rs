//! Residual copilot: a squashed Gaussian policy over the 7D residual and
//! its PPO trainer.

pub mod gradcheck;
pub mod policy;
pub mod ppo;
pub mod train;

pub use policy::{MeanCopilot, Mode, Policy, PolicyCache, PolicyOutput, ACT_DIM};
pub use ppo::{adapt_lr, gae, loss_and_grad, normalize_advantages, ppo_update, LossParts, PpoConfig, PpoState, RolloutBuffer, Sample, Transition, UpdateStats};
pub use train::{train, CurvePoint, TrainOutcome, TrainSetup};
