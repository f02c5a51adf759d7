//! Flat observation layouts.
//!
//! State (20): ee position, ee quaternion (w,x,y,z), gripper, ee minus fixed
//! part, ee minus held part, linear and angular velocity. The copilot
//! observation appends the base action (8) and the previous residual (7).

use crate::error::{invalid_arg, Result};
use crate::se3::{quat_to_wxyz, BaseAction, ResidualAction};
use crate::tasks::EnvState;

pub const STATE_DIM: usize = 20;
pub const OBS_DIM: usize = STATE_DIM + BaseAction::DIM + ResidualAction::DIM;

pub mod layout {
    use std::ops::Range;
    pub const EE_POS: Range<usize> = 0..3;
    pub const EE_QUAT: Range<usize> = 3..7;
    pub const GRIPPER: usize = 7;
    pub const REL_FIXED: Range<usize> = 8..11;
    pub const REL_HELD: Range<usize> = 11..14;
    pub const LIN_VEL: Range<usize> = 14..17;
    pub const ANG_VEL: Range<usize> = 17..20;
    /// End-effector pose plus gripper, laid out like a base action.
    pub const PROPRIO: Range<usize> = 0..8;
    pub const BASE: Range<usize> = 20..28;
    pub const PREV_RES: Range<usize> = 28..35;
}

/// Observed robot/task state. Object positions carry the episode's
/// pose-estimation offsets.
pub fn observe_state(state: &EnvState) -> [f64; STATE_DIM] {
    let mut s = [0.0; STATE_DIM];
    let ee = &state.ee.pose;
    let fixed = state.fixed_pose.p + state.obs_offset_fixed;
    let held = state.held_pose.p + state.obs_offset_held;
    s[layout::EE_POS].copy_from_slice(ee.p.as_slice());
    s[layout::EE_QUAT].copy_from_slice(&quat_to_wxyz(&ee.q));
    s[layout::GRIPPER] = state.gripper;
    s[layout::REL_FIXED].copy_from_slice((ee.p - fixed).as_slice());
    s[layout::REL_HELD].copy_from_slice((ee.p - held).as_slice());
    s[layout::LIN_VEL].copy_from_slice(&state.twist.twist[0..3]);
    s[layout::ANG_VEL].copy_from_slice(&state.twist.twist[3..6]);
    s
}

pub fn pack_obs(state: &[f64], base: &BaseAction, prev_res: &ResidualAction) -> Result<[f64; OBS_DIM]> {
    if state.len() != STATE_DIM {
        return Err(invalid_arg(format!("state has {} entries, expected {STATE_DIM}", state.len())));
    }
    let mut o = [0.0; OBS_DIM];
    o[..STATE_DIM].copy_from_slice(state);
    o[layout::BASE].copy_from_slice(&base.to_array());
    o[layout::PREV_RES].copy_from_slice(&prev_res.to_array());
    Ok(o)
}

pub fn unpack_obs(o: &[f64]) -> Result<([f64; STATE_DIM], BaseAction, ResidualAction)> {
    if o.len() != OBS_DIM {
        return Err(invalid_arg(format!("observation has {} entries, expected {OBS_DIM}", o.len())));
    }
    let mut s = [0.0; STATE_DIM];
    s.copy_from_slice(&o[..STATE_DIM]);
    Ok((s, BaseAction::from_array(&o[layout::BASE])?, ResidualAction::from_slice(&o[layout::PREV_RES])?))
}

pub fn observe_copilot(state: &EnvState, base: &BaseAction, prev_res: &ResidualAction) -> [f64; OBS_DIM] {
    let mut o = [0.0; OBS_DIM];
    o[..STATE_DIM].copy_from_slice(&observe_state(state));
    o[layout::BASE].copy_from_slice(&base.to_array());
    o[layout::PREV_RES].copy_from_slice(&prev_res.to_array());
    o
}
