//! Nominal filter state, the error-state layout, and sensor sample types.
//!
//! The estimator carries a 39-dimensional error state ordered as
//!
//! ```text
//! (δp, δv, δΘ, δf₁..δf₄, δv_f₁..δv_f₄, δb_a, δb_ω)
//!   3    3    3    4×3         4×3        3     3     = 39
//! ```
//!
//! All matrices in the filter (covariance, dynamics, measurement Jacobians)
//! are indexed by this layout via the constants in [`layout`]. δΘ is a local
//! rotation vector applied on the right of the nominal orientation
//! ([`crate::so3`]); every other block is a plain additive error.

use nalgebra::{DVector, Vector3};

use crate::kinematics::{JointState, LEG_COUNT};
use crate::so3::Rotation;

/// Index constants for the 39-dim error state.
pub mod layout {
    /// Total error-state dimension.
    pub const DIM: usize = 39;
    /// Position error block start.
    pub const P: usize = 0;
    /// Velocity error block start.
    pub const V: usize = 3;
    /// Attitude (rotation-vector) error block start.
    pub const TH: usize = 6;
    /// Accelerometer bias error block start.
    pub const BA: usize = 33;
    /// Gyroscope bias error block start.
    pub const BW: usize = 36;

    /// Foot-position error block start for leg `l` (0..4).
    #[inline]
    pub const fn foot(l: usize) -> usize {
        9 + 3 * l
    }

    /// Foot-velocity error block start for leg `l` (0..4).
    #[inline]
    pub const fn foot_vel(l: usize) -> usize {
        21 + 3 * l
    }
}

/// Nominal (non-error) state: body pose and twist, foot-sphere centers and
/// velocities in the world frame, IMU biases in the body frame.
#[derive(Debug, Clone, PartialEq)]
pub struct RobotState {
    pub pos: Vector3<f64>,
    pub vel: Vector3<f64>,
    pub rot: Rotation,
    pub foot_pos: [Vector3<f64>; LEG_COUNT],
    pub foot_vel: [Vector3<f64>; LEG_COUNT],
    pub accel_bias: Vector3<f64>,
    pub gyro_bias: Vector3<f64>,
}

impl Default for RobotState {
    fn default() -> Self {
        RobotState {
            pos: Vector3::zeros(),
            vel: Vector3::zeros(),
            rot: Rotation::identity(),
            foot_pos: [Vector3::zeros(); LEG_COUNT],
            foot_vel: [Vector3::zeros(); LEG_COUNT],
            accel_bias: Vector3::zeros(),
            gyro_bias: Vector3::zeros(),
        }
    }
}

impl RobotState {
    /// Applies an error-state correction: vector blocks add, the rotation
    /// block is injected via boxplus. `delta` must have length 39.
    pub fn inject(&mut self, delta: &DVector<f64>) {
        debug_assert_eq!(delta.len(), layout::DIM);
        let seg = |start: usize| Vector3::new(delta[start], delta[start + 1], delta[start + 2]);
        self.pos += seg(layout::P);
        self.vel += seg(layout::V);
        self.rot = self.rot.boxplus(&seg(layout::TH));
        for l in 0..LEG_COUNT {
            self.foot_pos[l] += seg(layout::foot(l));
            self.foot_vel[l] += seg(layout::foot_vel(l));
        }
        self.accel_bias += seg(layout::BA);
        self.gyro_bias += seg(layout::BW);
    }

    /// Error-parameterized difference `self ⊟ other`, the inverse of
    /// [`RobotState::inject`] to first order. Identical inputs give an exact
    /// zero vector (the rotation difference short-circuits), which the IMM
    /// mixing relies on for bit-exact degenerate behavior.
    pub fn boxminus(&self, other: &RobotState) -> DVector<f64> {
        let mut d = DVector::zeros(layout::DIM);
        let mut put = |start: usize, v: Vector3<f64>| {
            d[start] = v.x;
            d[start + 1] = v.y;
            d[start + 2] = v.z;
        };
        put(layout::P, self.pos - other.pos);
        put(layout::V, self.vel - other.vel);
        let dtheta = if self.rot.matrix() == other.rot.matrix() {
            Vector3::zeros()
        } else {
            self.rot.boxminus(&other.rot)
        };
        put(layout::TH, dtheta);
        for l in 0..LEG_COUNT {
            put(layout::foot(l), self.foot_pos[l] - other.foot_pos[l]);
            put(layout::foot_vel(l), self.foot_vel[l] - other.foot_vel[l]);
        }
        put(layout::BA, self.accel_bias - other.accel_bias);
        put(layout::BW, self.gyro_bias - other.gyro_bias);
        d
    }

    pub fn is_finite(&self) -> bool {
        let v3 = |v: &Vector3<f64>| v.iter().all(|x| x.is_finite());
        v3(&self.pos)
            && v3(&self.vel)
            && self.rot.matrix().iter().all(|x| x.is_finite())
            && self.foot_pos.iter().all(v3)
            && self.foot_vel.iter().all(v3)
            && v3(&self.accel_bias)
            && v3(&self.gyro_bias)
    }
}

/// One raw IMU reading: angular rate and specific force in the body frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample {
    pub t: f64,
    pub gyro: Vector3<f64>,
    pub accel: Vector3<f64>,
}

impl ImuSample {
    pub fn is_finite(&self) -> bool {
        self.t.is_finite()
            && self.gyro.iter().all(|x| x.is_finite())
            && self.accel.iter().all(|x| x.is_finite())
    }
}

/// Joint encoder readings plus the stance flag for one leg.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LegObservation {
    pub joints: JointState,
    pub contact: bool,
}

/// Synchronized encoder sample across all four legs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LegSample {
    pub t: f64,
    pub legs: [LegObservation; LEG_COUNT],
}

impl LegSample {
    pub fn contact_flags(&self) -> [bool; LEG_COUNT] {
        [
            self.legs[0].contact,
            self.legs[1].contact,
            self.legs[2].contact,
            self.legs[3].contact,
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;

    #[test]
    fn inject_boxminus_round_trip() {
        let mut state = RobotState::default();
        state.pos = Vector3::new(1.0, 2.0, 3.0);
        state.rot = Rotation::exp(&Vector3::new(0.2, -0.1, 0.4));
        state.foot_pos[2] = Vector3::new(0.1, 0.2, -0.4);

        let mut delta = DVector::zeros(layout::DIM);
        for (i, v) in delta.iter_mut().enumerate() {
            *v = 1e-3 * (i as f64 + 1.0) * if i % 2 == 0 { 1.0 } else { -1.0 };
        }

        let mut perturbed = state.clone();
        perturbed.inject(&delta);
        let recovered = perturbed.boxminus(&state);
        // Rotation composition is only first-order commutative, but at this
        // magnitude the second-order term is ~1e-7 · ‖δΘ‖².
        assert!((recovered - delta).norm() < 1e-9);
    }

    #[test]
    fn boxminus_of_identical_states_is_exactly_zero() {
        let mut state = RobotState::default();
        state.rot = Rotation::exp(&Vector3::new(0.5, 0.5, -0.2));
        let d = state.clone().boxminus(&state);
        assert!(d.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn layout_blocks_tile_the_39_dimensions() {
        assert_eq!(layout::foot(0), 9);
        assert_eq!(layout::foot(3) + 3, layout::foot_vel(0));
        assert_eq!(layout::foot_vel(3) + 3, layout::BA);
        assert_eq!(layout::BW + 3, layout::DIM);
    }
}
