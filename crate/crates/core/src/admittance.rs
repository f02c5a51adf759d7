//! Task-space admittance: a diagonal virtual spring–mass–damper integrated
//! with forward Euler, velocity first.

use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Result};
use crate::se3::{axis_angle_to_quat, canonical, quat_to_axis_angle, Pose, Quat, Vec3};

/// Diagonal virtual inertia, damping and stiffness over
/// `(x, y, z, rx, ry, rz)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdmittanceParams {
    pub mass: [f64; 6],
    pub damping: [f64; 6],
    pub stiffness: [f64; 6],
}

/// Isotropic translational / rotational gains as they appear in the
/// workbench config.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdmittanceGains {
    pub k_x: f64,
    pub k_r: f64,
    pub m_x: f64,
    pub m_r: f64,
    pub d_x: f64,
    pub d_r: f64,
}

impl AdmittanceGains {
    /// Simulation column of the controller table.
    pub const SIM: AdmittanceGains = AdmittanceGains { k_x: 200.0, k_r: 100.0, m_x: 0.125, m_r: 0.015, d_x: 5.0, d_r: 1.2 };
    /// Hardware column. Kept for reference; the simulator never uses it.
    pub const REAL: AdmittanceGains = AdmittanceGains { k_x: 1000.0, k_r: 10.0, m_x: 0.1, m_r: 1e-3, d_x: 0.0, d_r: 0.0 };

    pub fn params(&self) -> AdmittanceParams {
        AdmittanceParams {
            mass: [self.m_x, self.m_x, self.m_x, self.m_r, self.m_r, self.m_r],
            damping: [self.d_x, self.d_x, self.d_x, self.d_r, self.d_r, self.d_r],
            stiffness: [self.k_x, self.k_x, self.k_x, self.k_r, self.k_r, self.k_r],
        }
    }
}

impl Default for AdmittanceGains {
    fn default() -> Self {
        Self::SIM
    }
}

impl Default for AdmittanceParams {
    fn default() -> Self {
        AdmittanceGains::SIM.params()
    }
}

impl AdmittanceParams {
    pub fn validate(&self) -> Result<()> {
        for i in 0..6 {
            if !(self.mass[i] > 0.0 && self.mass[i].is_finite()) {
                return Err(invalid_arg(format!("admittance mass[{i}] = {} must be > 0", self.mass[i])));
            }
            if !(self.damping[i] >= 0.0 && self.stiffness[i] >= 0.0) {
                return Err(invalid_arg(format!("admittance damping/stiffness[{i}] must be >= 0")));
            }
        }
        Ok(())
    }

    /// Per-episode controller randomization: scales on `K_x, K_r, M_x, M_r`.
    pub fn scaled(&self, k_x: f64, k_r: f64, m_x: f64, m_r: f64) -> AdmittanceParams {
        let mut out = *self;
        for i in 0..3 {
            out.stiffness[i] *= k_x;
            out.stiffness[i + 3] *= k_r;
            out.mass[i] *= m_x;
            out.mass[i + 3] *= m_r;
        }
        out
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Wrench {
    pub force: Vec3,
    pub torque: Vec3,
}

impl Wrench {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.force.x, self.force.y, self.force.z, self.torque.x, self.torque.y, self.torque.z]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

impl std::ops::Add for Wrench {
    type Output = Wrench;
    fn add(self, o: Wrench) -> Wrench {
        Wrench { force: self.force + o.force, torque: self.torque + o.torque }
    }
}

impl std::ops::AddAssign for Wrench {
    fn add_assign(&mut self, o: Wrench) {
        self.force += o.force;
        self.torque += o.torque;
    }
}

/// Pose error `(p - p_ref, log(q ⊗ q_ref⁻¹))`.
pub fn pose_error(pose: &Pose, reference: &Pose) -> [f64; 6] {
    let dp = pose.p - reference.p;
    let dr = if pose.q == reference.q { Vec3::zeros() } else { quat_to_axis_angle(&(pose.q * reference.q.inverse())) };
    [dp.x, dp.y, dp.z, dr.x, dr.y, dr.z]
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdmittanceState {
    /// Pose coordinates `(p, axis-angle of q ⊗ q_ref⁻¹)` as of the last step.
    pub xi: [f64; 6],
    pub xi_dot: [f64; 6],
    pub pose: Pose,
}

impl AdmittanceState {
    pub fn at_rest(pose: Pose) -> Self {
        let mut xi = [0.0; 6];
        xi[..3].copy_from_slice(pose.p.as_slice());
        Self { xi, xi_dot: [0.0; 6], pose }
    }

    pub fn linear_velocity(&self) -> Vec3 {
        Vec3::new(self.xi_dot[0], self.xi_dot[1], self.xi_dot[2])
    }

    pub fn angular_velocity(&self) -> Vec3 {
        Vec3::new(self.xi_dot[3], self.xi_dot[4], self.xi_dot[5])
    }

    /// `½ ξ̇ᵀMξ̇ + ½ eᵀKe` relative to `reference`.
    pub fn energy(&self, params: &AdmittanceParams, reference: &Pose) -> f64 {
        let e = pose_error(&self.pose, reference);
        (0..6)
            .map(|i| 0.5 * params.mass[i] * self.xi_dot[i].powi(2) + 0.5 * params.stiffness[i] * e[i].powi(2))
            .sum()
    }
}

/// One forward-Euler step of `M ξ̈ + D ξ̇ + K e = f`.
pub fn step(
    state: &AdmittanceState,
    params: &AdmittanceParams,
    f: &Wrench,
    reference: &Pose,
    dt: f64,
) -> Result<AdmittanceState> {
    if !f.is_finite() {
        return Err(invalid_arg(format!("non-finite wrench {:?}", f.to_array())));
    }
    if !(dt > 0.0) {
        return Err(invalid_arg(format!("dt = {dt} must be > 0")));
    }
    let e = pose_error(&state.pose, reference);
    let f = f.to_array();
    let mut xi_dot = state.xi_dot;
    for i in 0..6 {
        let f_sd = params.damping[i] * xi_dot[i] + params.stiffness[i] * e[i];
        let acc = (f[i] - f_sd) / params.mass[i];
        xi_dot[i] += dt * acc;
    }
    let p = state.pose.p + Vec3::new(xi_dot[0], xi_dot[1], xi_dot[2]) * dt;
    let dtheta = Vec3::new(xi_dot[3], xi_dot[4], xi_dot[5]) * dt;
    let q = if dtheta == Vec3::zeros() {
        state.pose.q
    } else {
        canonical(Quat::new_normalize((axis_angle_to_quat(&dtheta) * state.pose.q).into_inner()))
    };
    let pose = Pose { p, q };
    let r = if q == reference.q { Vec3::zeros() } else { quat_to_axis_angle(&(q * reference.q.inverse())) };
    Ok(AdmittanceState { xi: [p.x, p.y, p.z, r.x, r.y, r.z], xi_dot, pose })
}

/// First-order low-pass over finite-difference twists.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TwistFilter {
    /// Blend factor in `(0, 1]`; `1` disables filtering.
    pub coeff: f64,
    pub twist: [f64; 6],
}

impl TwistFilter {
    pub fn new(coeff: f64) -> Self {
        Self { coeff: coeff.clamp(f64::MIN_POSITIVE, 1.0), twist: [0.0; 6] }
    }

    pub fn reset(&mut self) {
        self.twist = [0.0; 6];
    }
}

/// Finite-difference `(v, ω)` between two poses, passed through `filter`.
pub fn estimate_twist(prev: &Pose, cur: &Pose, dt: f64, filter: &mut TwistFilter) -> Result<[f64; 6]> {
    if !(dt > 0.0) {
        return Err(invalid_arg(format!("dt = {dt} must be > 0")));
    }
    let v = (cur.p - prev.p) / dt;
    let w = quat_to_axis_angle(&(cur.q * prev.q.inverse())) / dt;
    let raw = [v.x, v.y, v.z, w.x, w.y, w.z];
    let a = filter.coeff;
    for (y, x) in filter.twist.iter_mut().zip(raw) {
        *y += a * (x - *y);
    }
    Ok(filter.twist)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    const DT: f64 = 1.0 / 120.0;

    #[test]
    fn equilibrium_is_fixed_point() {
        let params = AdmittanceParams::default();
        let reference = Pose::new(Vec3::new(0.1, -0.2, 0.3), axis_angle_to_quat(&Vec3::new(0.2, 0.1, -0.4)));
        let s0 = AdmittanceState::at_rest(reference);
        let s1 = step(&s0, &params, &Wrench::zero(), &reference, DT).unwrap();
        assert_eq!(s1.pose, s0.pose);
        assert_eq!(s1.xi_dot, [0.0; 6]);
    }

    #[test]
    fn single_step_matches_hand_euler() {
        let params = AdmittanceParams::default();
        let reference = Pose::identity();
        let s0 = AdmittanceState::at_rest(Pose::from_translation(Vec3::new(0.01, 0.0, 0.0)));
        let s1 = step(&s0, &params, &Wrench::zero(), &reference, DT).unwrap();
        // acc = -(200 * 0.01) / 0.125 = -16 m/s²
        assert_abs_diff_eq!(s1.xi_dot[0], -16.0 / 120.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s1.xi_dot[0], -0.13333, epsilon = 1e-5);
        assert_abs_diff_eq!(s1.pose.p.x, 0.01 - 16.0 / 120.0 / 120.0, epsilon = 1e-12);
    }

    #[test]
    fn constant_force_steady_state() {
        let params = AdmittanceParams::default();
        let reference = Pose::identity();
        let f = Wrench { force: Vec3::new(2.0, 0.0, 0.0), torque: Vec3::zeros() };
        let mut s = AdmittanceState::at_rest(reference);
        for _ in 0..(120 * 5) {
            s = step(&s, &params, &f, &reference, DT).unwrap();
        }
        assert_abs_diff_eq!(s.pose.p.x, 0.01, epsilon = 1e-9);
    }

    #[test]
    fn rejects_bad_input() {
        let s = AdmittanceState::at_rest(Pose::identity());
        let bad = Wrench { force: Vec3::new(f64::NAN, 0.0, 0.0), torque: Vec3::zeros() };
        assert!(step(&s, &AdmittanceParams::default(), &bad, &Pose::identity(), DT).is_err());
        assert!(step(&s, &AdmittanceParams::default(), &Wrench::zero(), &Pose::identity(), 0.0).is_err());
    }

    #[test]
    fn rotational_offset_decays() {
        let params = AdmittanceParams::default();
        let reference = Pose::identity();
        let mut s = AdmittanceState::at_rest(Pose::new(Vec3::zeros(), axis_angle_to_quat(&Vec3::new(0.0, 0.3, 0.2))));
        for _ in 0..(120 * 5) {
            s = step(&s, &params, &Wrench::zero(), &reference, DT).unwrap();
        }
        assert!(crate::se3::geodesic(&s.pose.q, &reference.q) < 1e-6);
    }

    #[test]
    fn twist_finite_difference_and_filter() {
        let a = Pose::identity();
        let b = Pose::from_translation(Vec3::new(0.01, 0.0, 0.0));
        let mut f = TwistFilter::new(1.0);
        let t = estimate_twist(&a, &b, 0.1, &mut f).unwrap();
        assert_abs_diff_eq!(t[0], 0.1, epsilon = 1e-15);
        assert_eq!(&t[1..], &[0.0; 5]);

        let mut f = TwistFilter::new(1.0);
        assert_eq!(estimate_twist(&a, &a, 0.1, &mut f).unwrap(), [0.0; 6]);

        // step response: remaining gap shrinks by (1 - a) each call
        let coeff = 0.3;
        let mut f = TwistFilter::new(coeff);
        let mut prev_gap = 0.1;
        for _ in 0..20 {
            let y = estimate_twist(&a, &b, 0.1, &mut f).unwrap()[0];
            let gap = 0.1 - y;
            assert_abs_diff_eq!(gap, prev_gap * (1.0 - coeff), epsilon = 1e-15);
            prev_gap = gap;
        }
    }

    proptest! {
        #[test]
        fn equilibrium_for_any_valid_params(
            m in 0.01f64..2.0, mr in 0.001f64..0.1, d in 0.0f64..20.0, k in 0.0f64..2000.0,
            x in -1.0f64..1.0, y in -1.0f64..1.0,
        ) {
            let g = AdmittanceGains { k_x: k, k_r: k / 10.0, m_x: m, m_r: mr, d_x: d, d_r: d / 4.0 };
            let reference = Pose::from_translation(Vec3::new(x, y, 0.2));
            let s0 = AdmittanceState::at_rest(reference);
            let s1 = step(&s0, &g.params(), &Wrench::zero(), &reference, DT).unwrap();
            prop_assert_eq!(s1.pose, s0.pose);
        }

        #[test]
        fn energy_dissipates(
            ex in -0.05f64..0.05, ey in -0.05f64..0.05, ez in -0.05f64..0.05,
            rx in -0.3f64..0.3, ry in -0.3f64..0.3, rz in -0.3f64..0.3,
        ) {
            let params = AdmittanceParams::default();
            let reference = Pose::identity();
            let mut s = AdmittanceState::at_rest(Pose::new(Vec3::new(ex, ey, ez), axis_angle_to_quat(&Vec3::new(rx, ry, rz))));
            let e0 = s.energy(&params, &reference);
            let mut prev = e0;
            // Symplectic Euler tracks a shadow energy; the physical one may rise
            // by O(dt) relative to the stiffest mode's rate between steps.
            let omega = (params.stiffness[3] / params.mass[3]).sqrt().max((params.stiffness[0] / params.mass[0]).sqrt());
            for _ in 0..600 {
                s = step(&s, &params, &Wrench::zero(), &reference, DT).unwrap();
                let e = s.energy(&params, &reference);
                prop_assert!(e <= prev + omega * DT * prev.max(1e-300) + 1e-15);
                prev = e;
            }
            prop_assert!(prev < 1e-6 * e0.max(1e-300) + 1e-18);
        }
    }
}
