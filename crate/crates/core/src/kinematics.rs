//! Closed-form kinematics for a 3-DoF quadruped leg with a spherical foot.
//!
//! Each leg is an abduction–hip–knee chain attached at a hip offset in the
//! body frame:
//!
//! ```text
//! ζ(φ) = hip + Rx(φ₁)·[ (0, s·l₁, 0) + Ry(φ₂)·( (0,0,−l₂) + Ry(φ₃)·(0,0,−l₃) ) ]
//! ```
//!
//! where `s = ±1` mirrors the abduction link for left/right legs. `ζ` locates
//! the *center* of the foot sphere (radius `r_foot`), not the contact point;
//! the contact point sits at `ζ + r` with `r = −r_foot·n̂` for ground normal
//! `n̂`. A stance foot that rolls instead of sticking moves its center at
//!
//! ```text
//! v_f = ω_f × r,    ω_f = R_body·(ω_body + J_rot(φ)·φ̇)
//! ```
//!
//! with `J_rot` collecting the joint axes (x, then the two pitch axes rotated
//! by the abduction joint). Everything here is analytic; the Jacobians are
//! exercised against finite differences in the tests.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::so3::Rotation;

/// Number of legs; indexing follows [`LegId`].
pub const LEG_COUNT: usize = 4;

/// Leg naming and ordering: left-front, right-front, left-hind, right-hind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LegId {
    LF = 0,
    RF = 1,
    LH = 2,
    RH = 3,
}

impl LegId {
    pub const ALL: [LegId; LEG_COUNT] = [LegId::LF, LegId::RF, LegId::LH, LegId::RH];

    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            LegId::LF => "LF",
            LegId::RF => "RF",
            LegId::LH => "LH",
            LegId::RH => "RH",
        }
    }

    pub fn from_name(name: &str) -> Option<LegId> {
        match name {
            "LF" => Some(LegId::LF),
            "RF" => Some(LegId::RF),
            "LH" => Some(LegId::LH),
            "RH" => Some(LegId::RH),
            _ => None,
        }
    }

    /// Diagonal trot pair: 0 for {LF, RH}, 1 for {RF, LH}.
    #[inline]
    pub fn trot_pair(self) -> usize {
        match self {
            LegId::LF | LegId::RH => 0,
            LegId::RF | LegId::LH => 1,
        }
    }
}

/// Geometry of one leg. All lengths in meters, hip offset in the body frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LegParams {
    pub hip_offset: Vector3<f64>,
    /// Abduction link length (hip roll axis to thigh plane).
    pub l1: f64,
    /// Thigh length.
    pub l2: f64,
    /// Shank length.
    pub l3: f64,
    /// +1 for left legs, −1 for right legs (mirrors the abduction link).
    pub side_sign: f64,
    /// Foot sphere radius.
    pub r_foot: f64,
}

impl LegParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.l1 > 0.0 && self.l2 > 0.0 && self.l3 > 0.0 && self.r_foot > 0.0) {
            return Err(Error::Config(
                "leg link lengths and foot radius must be positive".into(),
            ));
        }
        if self.side_sign != 1.0 && self.side_sign != -1.0 {
            return Err(Error::Config("side_sign must be +1 or -1".into()));
        }
        if !self.hip_offset.iter().all(|x| x.is_finite()) {
            return Err(Error::Config("hip_offset must be finite".into()));
        }
        Ok(())
    }
}

/// Canonical mid-size quadruped geometry, ordered [LF, RF, LH, RH].
pub fn default_legs() -> [LegParams; LEG_COUNT] {
    let leg = |x: f64, y: f64, side: f64| LegParams {
        hip_offset: Vector3::new(x, y, 0.0),
        l1: 0.083,
        l2: 0.25,
        l3: 0.25,
        side_sign: side,
        r_foot: 0.02,
    };
    [
        leg(0.24, 0.05, 1.0),   // LF
        leg(0.24, -0.05, -1.0), // RF
        leg(-0.24, 0.05, 1.0),  // LH
        leg(-0.24, -0.05, -1.0), // RH
    ]
}

/// Joint angles and rates for one leg: (abduction about body-x, hip pitch
/// about body-y, knee pitch about body-y).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct JointState {
    pub q: Vector3<f64>,
    pub dq: Vector3<f64>,
}

impl JointState {
    pub fn new(q: Vector3<f64>, dq: Vector3<f64>) -> Self {
        JointState { q, dq }
    }

    pub fn from_angles(q: Vector3<f64>) -> Self {
        JointState { q, dq: Vector3::zeros() }
    }
}

#[inline]
fn rot_x(phi: f64) -> Matrix3<f64> {
    let (s, c) = phi.sin_cos();
    Matrix3::new(
        1.0, 0.0, 0.0, //
        0.0, c, -s, //
        0.0, s, c,
    )
}

#[inline]
fn rot_y(phi: f64) -> Matrix3<f64> {
    let (s, c) = phi.sin_cos();
    Matrix3::new(
        c, 0.0, s, //
        0.0, 1.0, 0.0, //
        -s, 0.0, c,
    )
}

/// Foot-sphere center in the body frame.
pub fn forward_kinematics(joints: &JointState, leg: &LegParams) -> Vector3<f64> {
    let r1 = rot_x(joints.q.x);
    let r2 = rot_y(joints.q.y);
    let r3 = rot_y(joints.q.z);
    let shank = Vector3::new(0.0, 0.0, -leg.l3);
    let thigh = Vector3::new(0.0, 0.0, -leg.l2) + r3 * shank;
    let abd = Vector3::new(0.0, leg.side_sign * leg.l1, 0.0) + r2 * thigh;
    leg.hip_offset + r1 * abd
}

/// Joint axes and axis origins in the body frame, the building blocks of both
/// Jacobians: `(a₁, a₂, a₃, o₂, o₃)`. Axis 1 passes through the hip offset;
/// axes 2 and 3 are the (shared-direction) pitch axes displaced along the
/// chain.
fn chain_axes(
    joints: &JointState,
    leg: &LegParams,
) -> (Vector3<f64>, Vector3<f64>, Vector3<f64>, Vector3<f64>, Vector3<f64>) {
    let r1 = rot_x(joints.q.x);
    let a1 = Vector3::x();
    let a2 = r1 * Vector3::y(); // Ry leaves its own axis fixed, so a3 == a2
    let o2 = leg.hip_offset + r1 * Vector3::new(0.0, leg.side_sign * leg.l1, 0.0);
    let o3 = o2 + r1 * (rot_y(joints.q.y) * Vector3::new(0.0, 0.0, -leg.l2));
    (a1, a2, a2, o2, o3)
}

/// Analytic positional Jacobian `J = ∂ζ/∂φ` (body frame); foot velocity
/// relative to the body is `J·φ̇`.
pub fn jacobian(joints: &JointState, leg: &LegParams) -> Matrix3<f64> {
    let p = forward_kinematics(joints, leg);
    let (a1, a2, a3, o2, o3) = chain_axes(joints, leg);
    let c1 = a1.cross(&(p - leg.hip_offset));
    let c2 = a2.cross(&(p - o2));
    let c3 = a3.cross(&(p - o3));
    Matrix3::from_columns(&[c1, c2, c3])
}

/// Rotational Jacobian: columns are the joint axes in the body frame, so the
/// foot frame's angular velocity relative to the body is `J_rot·φ̇`.
pub fn rot_jacobian(joints: &JointState, _leg: &LegParams) -> Matrix3<f64> {
    let r1 = rot_x(joints.q.x);
    let a1 = Vector3::x();
    let a2 = r1 * Vector3::y();
    Matrix3::from_columns(&[a1, a2, a2])
}

/// World-frame angular velocity of the foot frame:
/// `ω_f = R_body·(ω_body + J_rot(φ)·φ̇)`.
pub fn foot_angular_velocity(
    joints: &JointState,
    body_omega: &Vector3<f64>,
    r_body: &Rotation,
    leg: &LegParams,
) -> Vector3<f64> {
    *r_body * &(body_omega + rot_jacobian(joints, leg) * joints.dq)
}

/// Foot-center velocity under the rolling-contact model: `v_f = ω_f × r`.
#[inline]
pub fn rolling_velocity(omega_f: &Vector3<f64>, r: &Vector3<f64>) -> Vector3<f64> {
    omega_f.cross(r)
}

/// Radius vector from the foot-sphere center to the contact point on ground
/// with unit normal `n̂`: `r = −r_foot·n̂`.
#[inline]
pub fn contact_radius(normal: &Vector3<f64>, r_foot: f64) -> Vector3<f64> {
    -(normal * r_foot)
}

/// Closed-form inverse kinematics on the knee-backward branch (φ₃ ≤ 0).
///
/// Solves abduction first — the component of the hip-relative target along
/// the rotated y-axis must equal `s·l₁` — picking the solution that puts the
/// leg plane below the hip, then the planar two-link problem for hip pitch
/// and knee. Returns angles only (zero rates).
pub fn inverse_kinematics(foot_body: &Vector3<f64>, leg: &LegParams) -> Result<JointState> {
    let q = foot_body - leg.hip_offset;
    let off = leg.side_sign * leg.l1;
    let rho = q.y.hypot(q.z);
    if rho < leg.l1 {
        // Target inside the abduction cylinder: no φ₁ places the leg plane
        // through it.
        return Err(Error::OutOfWorkspace {
            reach: rho,
            min: leg.l1,
            max: (leg.l1 * leg.l1 + (leg.l2 + leg.l3).powi(2)).sqrt(),
        });
    }
    let phi1 = wrap_angle(q.z.atan2(q.y) + (off / rho).clamp(-1.0, 1.0).acos());

    // Rotate the target into the leg plane; its y-component is s·l₁ by
    // construction, leaving a planar two-link problem in x–z.
    let u = rot_x(-phi1) * q;
    let (ux, uz) = (u.x, u.z);
    let d2 = ux * ux + uz * uz;
    let c3 = (d2 - leg.l2 * leg.l2 - leg.l3 * leg.l3) / (2.0 * leg.l2 * leg.l3);
    if !(-1.0..=1.0).contains(&c3) {
        return Err(Error::OutOfWorkspace {
            reach: d2.sqrt(),
            min: (leg.l2 - leg.l3).abs(),
            max: leg.l2 + leg.l3,
        });
    }
    let phi3 = -c3.acos(); // knee-backward branch
    let k1 = leg.l2 + leg.l3 * c3;
    let k2 = leg.l3 * phi3.sin();
    let phi2 = wrap_angle((-ux).atan2(-uz) - k2.atan2(k1));

    Ok(JointState::from_angles(Vector3::new(phi1, phi2, phi3)))
}

/// Wraps an angle into (−π, π].
fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    let mut a = (a + PI).rem_euclid(2.0 * PI) - PI;
    if a == -PI {
        a = PI;
    }
    a
}
