//! Analytic pin-in-bore contact.
//!
//! Penalty contact with stiffness `k_c` along the surface normal plus a
//! Coulomb-capped, velocity-regularized tangential friction. The bore is a
//! cylinder with a 45° entrance chamfer; the pin's side is sampled at two
//! points (tip and entrance height) that share the line stiffness equally.

use std::f64::consts::FRAC_1_SQRT_2;

use crate::admittance::Wrench;
use crate::se3::{wrap_angle, yaw_of, Pose, Vec3};
use crate::tasks::{TaskKind, TaskSpec};

/// Tangential speed below which friction is viscous instead of saturated.
pub const FRICTION_V_REG: f64 = 5e-3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Surface {
    Face,
    Chamfer,
    Wall,
    Bottom,
    Mesh,
    Table,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContactPoint {
    pub surface: Surface,
    pub point: Vec3,
    /// Unit normal pushing the held part out of the fixed part.
    pub normal: Vec3,
    pub depth: f64,
    pub stiffness: f64,
}

impl ContactPoint {
    pub fn normal_force(&self) -> Vec3 {
        self.normal * (self.stiffness * self.depth)
    }
}

/// Bottom center of the held part's axial member.
pub fn held_tip(spec: &TaskSpec, held: &Pose) -> Vec3 {
    held.transform_point(&Vec3::new(0.0, 0.0, -spec.grip_offset))
}

/// Tooth phase of the held gear relative to the fixed one, in `(-π/n, π/n]`.
pub fn gear_phase(spec: &TaskSpec, held: &Pose, fixed: &Pose) -> f64 {
    if spec.n_teeth == 0 {
        return 0.0;
    }
    let pitch = 2.0 * std::f64::consts::PI / spec.n_teeth as f64;
    let rel = wrap_angle(yaw_of(&held.q) - yaw_of(&fixed.q));
    let k = (rel / pitch).round();
    rel - k * pitch
}

/// Lateral offset from the fixed axis and the interference `ρ + r_pin - r_bore`.
fn radial(spec: &TaskSpec, fixed: &Pose, at: &Vec3) -> (Vec3, f64) {
    let off = Vec3::new(at.x - fixed.p.x, at.y - fixed.p.y, 0.0);
    let rho = off.norm();
    (off, rho + spec.part_radius - spec.hole_radius)
}

fn inward(off: &Vec3) -> Vec3 {
    let n = off.norm();
    if n > 0.0 {
        -off / n
    } else {
        Vec3::zeros()
    }
}

/// Contact points between the held part and the fixed part / table.
pub fn contacts(spec: &TaskSpec, held: &Pose, fixed: &Pose) -> Vec<ContactPoint> {
    let mut out = Vec::new();
    let k = spec.contact_stiffness;
    let tip = held_tip(spec, held);
    let z_top = fixed.p.z;

    if tip.z < 0.0 {
        out.push(ContactPoint { surface: Surface::Table, point: tip, normal: Vec3::z(), depth: -tip.z, stiffness: k });
    }

    let depth = z_top - tip.z;
    if depth <= 0.0 {
        return out;
    }
    let (off, interference) = radial(spec, fixed, &tip);
    let rho = off.norm();

    if interference >= spec.chamfer {
        if rho - spec.part_radius < spec.face_radius {
            out.push(ContactPoint { surface: Surface::Face, point: tip, normal: Vec3::z(), depth, stiffness: k });
        }
        return out;
    }
    if depth < spec.chamfer {
        let pen = interference - (spec.chamfer - depth);
        if pen > 0.0 {
            let normal = (inward(&off) + Vec3::z()) * FRAC_1_SQRT_2;
            out.push(ContactPoint {
                surface: Surface::Chamfer,
                point: tip,
                normal,
                depth: pen * FRAC_1_SQRT_2,
                stiffness: k,
            });
        }
        return out;
    }

    // Inside the bore below the chamfer.
    if interference > 0.0 {
        out.push(ContactPoint { surface: Surface::Wall, point: tip, normal: inward(&off), depth: interference, stiffness: 0.5 * k });
    }
    if spec.kind != TaskKind::Nut {
        let axis = held.q * Vec3::z();
        let z_entry = z_top - spec.chamfer;
        if axis.z.abs() > 1e-6 {
            let entry = tip + axis * ((z_entry - tip.z) / axis.z);
            let (off_e, interference_e) = radial(spec, fixed, &entry);
            if interference_e > 0.0 {
                out.push(ContactPoint {
                    surface: Surface::Wall,
                    point: entry,
                    normal: inward(&off_e),
                    depth: interference_e,
                    stiffness: 0.5 * k,
                });
            }
        }
        let bottom = depth - spec.insertion_depth;
        if bottom > 0.0 {
            out.push(ContactPoint { surface: Surface::Bottom, point: tip, normal: Vec3::z(), depth: bottom, stiffness: k });
        }
        if spec.kind == TaskKind::Gear && depth > spec.mesh_depth && gear_phase(spec, held, fixed).abs() > spec.phase_tol {
            out.push(ContactPoint {
                surface: Surface::Mesh,
                point: tip,
                normal: Vec3::z(),
                depth: depth - spec.mesh_depth,
                stiffness: k,
            });
        }
    }
    out
}

/// Net contact wrench about the end-effector point, given the end-effector
/// twist `(v, ω)` used for friction.
pub fn contact_wrench(spec: &TaskSpec, points: &[ContactPoint], ee: &Pose, v: &Vec3, w: &Vec3) -> Wrench {
    let mut total = Wrench::zero();
    for c in points {
        let r = c.point - ee.p;
        let fn_ = c.normal_force();
        let vc = v + w.cross(&r);
        let vt = vc - c.normal * vc.dot(&c.normal);
        let cap = spec.mu * fn_.norm();
        let ft = -vt * (cap / vt.norm().max(FRICTION_V_REG));
        let f = fn_ + ft;
        total.force += f;
        total.torque += r.cross(&f);
    }
    total
}
