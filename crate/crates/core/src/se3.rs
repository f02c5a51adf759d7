//! Pose, quaternion and action algebra.
//!
//! Quaternions are stored and serialized in `(w, x, y, z)` order and kept in
//! the `w >= 0` hemisphere, so `q` and `-q` always map to the same bits.

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Result};

pub type Vec3 = Vector3<f64>;
pub type Quat = UnitQuaternion<f64>;

/// Tolerance on `|‖q‖ - 1|` for quaternions handed in from outside.
pub const UNIT_TOL: f64 = 1e-6;

/// Flip `q` into the `w >= 0` hemisphere.
pub fn canonical(q: Quat) -> Quat {
    if q.w < 0.0 {
        Quat::new_unchecked(-q.into_inner())
    } else {
        q
    }
}

pub fn quat_from_wxyz(w: f64, x: f64, y: f64, z: f64) -> Quat {
    canonical(Quat::new_normalize(Quaternion::new(w, x, y, z)))
}

pub fn quat_to_wxyz(q: &Quat) -> [f64; 4] {
    [q.w, q.i, q.j, q.k]
}

/// Rotation by `‖v‖` radians about `v / ‖v‖`. The zero vector maps to identity.
pub fn axis_angle_to_quat(v: &Vec3) -> Quat {
    let theta = v.norm();
    if theta == 0.0 {
        return Quat::identity();
    }
    let half = 0.5 * theta;
    let s = half.sin() / theta;
    let q = Quaternion::new(half.cos(), v.x * s, v.y * s, v.z * s);
    canonical(Quat::new_normalize(q))
}

/// Inverse of [`axis_angle_to_quat`], with rotation angle in `[0, π]`.
pub fn quat_to_axis_angle(q: &Quat) -> Vec3 {
    let q = canonical(*q);
    let v = Vec3::new(q.i, q.j, q.k);
    let s = v.norm();
    if s < 1e-12 {
        // first order: θ ≈ 2 s / w
        return v * (2.0 / q.w);
    }
    let theta = 2.0 * s.atan2(q.w);
    v * (theta / s)
}

/// Angle of the relative rotation between two unit quaternions, in `[0, π]`.
pub fn geodesic(a: &Quat, b: &Quat) -> f64 {
    let r = a.inverse() * b;
    let v = Vec3::new(r.i, r.j, r.k).norm();
    2.0 * v.atan2(r.w.abs())
}

/// Checked geodesic distance for raw quaternions in `(w, x, y, z)` order.
pub fn quat_geodesic(a: [f64; 4], b: [f64; 4]) -> Result<f64> {
    let qa = checked_unit(a)?;
    let qb = checked_unit(b)?;
    Ok(geodesic(&qa, &qb))
}

fn checked_unit(q: [f64; 4]) -> Result<Quat> {
    let raw = Quaternion::new(q[0], q[1], q[2], q[3]);
    let n = raw.norm();
    if !n.is_finite() || (n - 1.0).abs() > UNIT_TOL {
        return Err(invalid_arg(format!("quaternion {q:?} is not unit norm (‖q‖ = {n})")));
    }
    Ok(Quat::new_unchecked(raw))
}

/// Yaw of the rotated x-axis projected onto the world xy plane.
pub fn yaw_of(q: &Quat) -> f64 {
    let x = q * Vec3::x();
    x.y.atan2(x.x)
}

/// Wrap an angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut r = a % two_pi;
    if r <= -std::f64::consts::PI {
        r += two_pi;
    } else if r > std::f64::consts::PI {
        r -= two_pi;
    }
    r
}

/// Angle between the body z-axis and world vertical.
pub fn tilt_of(q: &Quat) -> f64 {
    let z = q * Vec3::z();
    z.z.clamp(-1.0, 1.0).acos()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub p: Vec3,
    pub q: Quat,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn new(p: Vec3, q: Quat) -> Self {
        Self { p, q: canonical(q) }
    }

    pub fn identity() -> Self {
        Self { p: Vec3::zeros(), q: Quat::identity() }
    }

    pub fn from_translation(p: Vec3) -> Self {
        Self { p, q: Quat::identity() }
    }

    /// `self ∘ other`: apply `other` in the frame of `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose::new(self.p + self.q * other.p, self.q * other.q)
    }

    pub fn inverse(&self) -> Pose {
        let qi = self.q.inverse();
        Pose::new(-(qi * self.p), qi)
    }

    pub fn transform_point(&self, x: &Vec3) -> Vec3 {
        self.p + self.q * x
    }

    pub fn to_array(&self) -> [f64; 7] {
        let [w, x, y, z] = quat_to_wxyz(&self.q);
        [self.p.x, self.p.y, self.p.z, w, x, y, z]
    }

    pub fn from_array(a: &[f64]) -> Result<Pose> {
        if a.len() != 7 {
            return Err(invalid_arg(format!("pose needs 7 values, got {}", a.len())));
        }
        let q = checked_unit([a[3], a[4], a[5], a[6]])?;
        Ok(Pose { p: Vec3::new(a[0], a[1], a[2]), q: canonical(q) })
    }
}

/// 8D pilot command: fingertip target pose plus gripper openness.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BaseAction {
    pub pose: Pose,
    /// Openness in `[-1, 1]`; `+1` is fully open.
    pub gripper: f64,
}

impl BaseAction {
    pub const DIM: usize = 8;

    pub fn new(pose: Pose, gripper: f64) -> Self {
        Self { pose, gripper: gripper.clamp(-1.0, 1.0) }
    }

    pub fn to_array(&self) -> [f64; 8] {
        let p = self.pose.to_array();
        [p[0], p[1], p[2], p[3], p[4], p[5], p[6], self.gripper]
    }

    pub fn from_array(a: &[f64]) -> Result<BaseAction> {
        if a.len() != Self::DIM {
            return Err(invalid_arg(format!("base action needs 8 values, got {}", a.len())));
        }
        let pose = Pose::from_array(&a[..7])?;
        if !(-1.0..=1.0).contains(&a[7]) {
            return Err(invalid_arg(format!("gripper {} outside [-1, 1]", a[7])));
        }
        Ok(BaseAction { pose, gripper: a[7] })
    }
}

/// 7D normalized correction: position delta, axis-angle delta, gripper delta.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ResidualAction {
    pub dp: Vec3,
    pub dtheta: Vec3,
    pub du: f64,
}

impl ResidualAction {
    pub const DIM: usize = 7;

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn to_array(&self) -> [f64; 7] {
        [self.dp.x, self.dp.y, self.dp.z, self.dtheta.x, self.dtheta.y, self.dtheta.z, self.du]
    }

    pub fn from_slice(a: &[f64]) -> Result<ResidualAction> {
        if a.len() != Self::DIM {
            return Err(invalid_arg(format!("residual needs 7 values, got {}", a.len())));
        }
        Ok(ResidualAction {
            dp: Vec3::new(a[0], a[1], a[2]),
            dtheta: Vec3::new(a[3], a[4], a[5]),
            du: a[6],
        })
    }

    pub fn norm(&self) -> f64 {
        self.to_array().iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// Physical magnitude of one normalized residual unit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResidualScale {
    /// meters per unit
    pub s_p: f64,
    /// radians per unit
    pub s_r: f64,
    /// openness per unit
    pub s_u: f64,
}

impl Default for ResidualScale {
    fn default() -> Self {
        Self { s_p: 0.01, s_r: 0.1, s_u: 0.2 }
    }
}

impl ResidualScale {
    pub fn new(s_p: f64, s_r: f64, s_u: f64) -> Result<Self> {
        let s = Self { s_p, s_r, s_u };
        s.validate()?;
        Ok(s)
    }

    /// All-zero scale, used to ablate the copilot.
    pub fn disabled() -> Self {
        Self { s_p: 0.0, s_r: 0.0, s_u: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("s_p", self.s_p), ("s_r", self.s_r), ("s_u", self.s_u)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid_arg(format!("residual scale {name} = {v} must be > 0")));
            }
        }
        Ok(())
    }
}

/// `base ⊕ scale·res`: additive on position and gripper, left-multiplied
/// rotation increment on orientation.
pub fn compose_residual(base: &BaseAction, res: &ResidualAction, scale: &ResidualScale) -> BaseAction {
    let p = base.pose.p + res.dp * scale.s_p;
    let rot = res.dtheta * scale.s_r;
    let q = if rot == Vec3::zeros() {
        base.pose.q
    } else {
        canonical(Quat::new_normalize((axis_angle_to_quat(&rot) * base.pose.q).into_inner()))
    };
    let gripper = (base.gripper + res.du * scale.s_u).clamp(-1.0, 1.0);
    BaseAction { pose: Pose { p, q }, gripper }
}

/// Per-dimension running mean and population variance.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningNormalizer {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: u64,
    pub frozen: bool,
}

impl RunningNormalizer {
    pub const CLIP: f64 = 5.0;
    pub const EPS: f64 = 1e-8;

    pub fn new(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], var: vec![1.0; dim], count: 0, frozen: false }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(invalid_arg(format!(
                "normalizer dimension {} does not match input {}",
                self.dim(),
                x.len()
            )));
        }
        Ok(())
    }

    /// Welford update. No-op when frozen.
    pub fn update(&mut self, x: &[f64]) -> Result<()> {
        self.check(x)?;
        if self.frozen {
            return Ok(());
        }
        self.count += 1;
        let n = self.count as f64;
        for i in 0..x.len() {
            if self.count == 1 {
                self.mean[i] = x[i];
                self.var[i] = 0.0;
                continue;
            }
            let delta = x[i] - self.mean[i];
            self.mean[i] += delta / n;
            let m2 = self.var[i] * (n - 1.0) + delta * (x[i] - self.mean[i]);
            self.var[i] = (m2 / n).max(0.0);
        }
        Ok(())
    }

    pub fn std(&self, i: usize) -> f64 {
        self.var[i].sqrt().max(Self::EPS)
    }

    pub fn normalize(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check(x)?;
        Ok(x
            .iter()
            .enumerate()
            .map(|(i, v)| ((v - self.mean[i]) / self.std(i)).clamp(-Self::CLIP, Self::CLIP))
            .collect())
    }

    pub fn denormalize(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check(z)?;
        Ok(z.iter().enumerate().map(|(i, v)| v * self.std(i) + self.mean[i]).collect())
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_1_SQRT_2, FRAC_PI_2, PI};

    #[test]
    fn geodesic_examples() {
        let id = [1.0, 0.0, 0.0, 0.0];
        assert_eq!(quat_geodesic(id, id).unwrap(), 0.0);
        assert_abs_diff_eq!(quat_geodesic(id, [0.0, 0.0, 0.0, 1.0]).unwrap(), PI, epsilon = 1e-12);
        let qx = [FRAC_1_SQRT_2, FRAC_1_SQRT_2, 0.0, 0.0];
        assert_abs_diff_eq!(quat_geodesic(id, qx).unwrap(), FRAC_PI_2, epsilon = 1e-12);
        // sign invariance
        assert_abs_diff_eq!(quat_geodesic(id, [-1.0, 0.0, 0.0, 0.0]).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn geodesic_rejects_non_unit() {
        assert!(matches!(
            quat_geodesic([1.0, 0.0, 0.0, 0.0], [2.0, 0.0, 0.0, 0.0]),
            Err(crate::Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn axis_angle_examples() {
        assert_eq!(axis_angle_to_quat(&Vec3::zeros()), Quat::identity());
        let q = axis_angle_to_quat(&Vec3::new(PI, 0.0, 0.0));
        assert_abs_diff_eq!(q.w, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(q.i, 1.0, epsilon = 1e-12);
        let q = axis_angle_to_quat(&Vec3::new(0.0, 0.0, FRAC_PI_2));
        // cos(π/4), sin(π/4)
        assert_abs_diff_eq!(q.w, 0.70711, epsilon = 1e-5);
        assert_abs_diff_eq!(q.k, 0.70711, epsilon = 1e-5);
        assert_abs_diff_eq!(q.w, (PI / 4.0).cos(), epsilon = 1e-15);
    }

    #[test]
    fn axis_angle_log_inverts_exp() {
        let v = Vec3::new(0.3, -1.1, 0.7);
        let back = quat_to_axis_angle(&axis_angle_to_quat(&v));
        assert_abs_diff_eq!((back - v).norm(), 0.0, epsilon = 1e-12);
        let tiny = Vec3::new(1e-14, 0.0, -2e-14);
        assert_abs_diff_eq!((quat_to_axis_angle(&axis_angle_to_quat(&tiny)) - tiny).norm(), 0.0, epsilon = 1e-20);
    }

    #[test]
    fn compose_examples() {
        let scale = ResidualScale::default();
        let base = BaseAction::new(Pose::new(Vec3::new(0.1, 0.2, 0.3), axis_angle_to_quat(&Vec3::new(0.1, 0.2, 0.3))), 0.4);
        let out = compose_residual(&base, &ResidualAction::zero(), &scale);
        assert_eq!(out, base);

        let res = ResidualAction { dp: Vec3::new(1.0, 0.0, 0.0), ..Default::default() };
        let out = compose_residual(&base, &res, &scale);
        assert_abs_diff_eq!(out.pose.p.x - base.pose.p.x, 0.01, epsilon = 1e-15);
        assert_eq!(out.pose.p.y, base.pose.p.y);

        let base = BaseAction::new(Pose::identity(), 0.0);
        let res = ResidualAction { dtheta: Vec3::new(0.0, 0.0, FRAC_PI_2), ..Default::default() };
        let out = compose_residual(&base, &res, &ResidualScale::new(0.01, 1.0, 0.2).unwrap());
        assert_abs_diff_eq!(out.pose.q.w, 0.70711, epsilon = 1e-5);
        assert_abs_diff_eq!(out.pose.q.k, 0.70711, epsilon = 1e-5);
    }

    #[test]
    fn gripper_saturates() {
        let base = BaseAction::new(Pose::identity(), 0.9);
        let res = ResidualAction { du: 1.0, ..Default::default() };
        assert_eq!(compose_residual(&base, &res, &ResidualScale::default()).gripper, 1.0);
    }

    #[test]
    fn residual_scale_validation() {
        assert!(ResidualScale::new(0.0, 0.1, 0.2).is_err());
        assert!(ResidualScale::new(0.01, -0.1, 0.2).is_err());
    }

    #[test]
    fn normalizer_examples() {
        let mut n = RunningNormalizer::new(1);
        for x in [1.0, 2.0, 3.0] {
            n.update(&[x]).unwrap();
        }
        assert_abs_diff_eq!(n.mean[0], 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(n.var[0], 2.0 / 3.0, epsilon = 1e-15);
        assert_eq!(n.normalize(&[2.0]).unwrap(), vec![0.0]);

        let mut c = RunningNormalizer::new(2);
        for _ in 0..100 {
            c.update(&[4.0, -1.0]).unwrap();
        }
        assert_eq!(c.var, vec![0.0, 0.0]);
        assert_eq!(c.normalize(&[4.0, -1.0]).unwrap(), vec![0.0, 0.0]);
        assert!(c.normalize(&[1.0]).is_err());
    }

    #[test]
    fn frozen_normalizer_ignores_updates() {
        let mut n = RunningNormalizer::new(2);
        n.update(&[1.0, 2.0]).unwrap();
        n.freeze();
        let before = n.clone();
        n.update(&[100.0, -50.0]).unwrap();
        assert_eq!(n, before);
    }

    fn arb_quat() -> impl Strategy<Value = Quat> {
        (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0)
            .prop_filter("non-degenerate", |(w, x, y, z)| w * w + x * x + y * y + z * z > 1e-3)
            .prop_map(|(w, x, y, z)| quat_from_wxyz(w, x, y, z))
    }

    fn arb_vec3(r: f64) -> impl Strategy<Value = Vec3> {
        (-r..r, -r..r, -r..r).prop_map(|(x, y, z)| Vec3::new(x, y, z))
    }

    proptest! {
        #[test]
        fn geodesic_is_metric(a in arb_quat(), b in arb_quat(), c in arb_quat()) {
            let ab = geodesic(&a, &b);
            prop_assert!((0.0..=PI + 1e-12).contains(&ab));
            prop_assert!((ab - geodesic(&b, &a)).abs() < 1e-12);
            prop_assert!(geodesic(&a, &a) < 1e-7);
            let neg = Quat::new_unchecked(-a.into_inner());
            prop_assert!(geodesic(&a, &neg) < 1e-7);
            prop_assert!(ab <= geodesic(&a, &c) + geodesic(&c, &b) + 1e-9);
        }

        #[test]
        fn zero_residual_is_identity(p in arb_vec3(1.0), q in arb_quat(), u in -1.0f64..1.0) {
            let base = BaseAction::new(Pose::new(p, q), u);
            let out = compose_residual(&base, &ResidualAction::zero(), &ResidualScale::default());
            prop_assert_eq!(out.pose.p, base.pose.p);
            prop_assert_eq!(out.gripper, base.gripper);
            prop_assert!(geodesic(&out.pose.q, &base.pose.q) <= 1e-12);
        }

        #[test]
        fn compose_preserves_invariants(
            p in arb_vec3(1.0), q in arb_quat(), u in -1.0f64..1.0,
            dp in arb_vec3(1.0), dth in arb_vec3(1.0), du in -1.0f64..1.0,
        ) {
            let base = BaseAction::new(Pose::new(p, q), u);
            let out = compose_residual(&base, &ResidualAction { dp, dtheta: dth, du }, &ResidualScale::default());
            prop_assert!((out.pose.q.into_inner().norm() - 1.0).abs() <= 1e-9);
            prop_assert!((-1.0..=1.0).contains(&out.gripper));
            prop_assert!(out.pose.q.w >= 0.0);
        }

        #[test]
        fn normalize_round_trip(xs in proptest::collection::vec(-10.0f64..10.0, 3..20), probe in -3.0f64..3.0) {
            let mut n = RunningNormalizer::new(1);
            for x in &xs { n.update(&[*x]).unwrap(); }
            // keep the probe inside the clip window
            let x = n.mean[0] + probe * n.std(0);
            let z = n.normalize(&[x]).unwrap();
            let back = n.denormalize(&z).unwrap();
            prop_assert!((back[0] - x).abs() <= 1e-9);
            prop_assert!(n.var[0] >= 0.0);
        }
    }
}
