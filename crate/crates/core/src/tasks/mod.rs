//! Assembly tasks: geometry, contact, domain randomization, reward and the
//! stepped environment.

pub mod contact;
mod dmr;
mod env;
mod observe;
mod reward;
mod spec;

pub use dmr::DmrConfig;
pub use env::{progression, Engagement, Env, EnvState, Events, StepResult, GRIPPER_RATE, TWIST_FILTER_COEFF};
pub use observe::{layout, observe_copilot, observe_state, pack_obs, unpack_obs, OBS_DIM, STATE_DIM};
pub use reward::{compute_reward, force_penalty, reward_terms, RewardConfig, RewardTerms};
pub use spec::{TaskKind, TaskSpec};
