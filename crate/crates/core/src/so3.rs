//! Rotation algebra on SO(3) with rotation-matrix storage.
//!
//! The estimator keeps body orientation as a full 3x3 rotation matrix `G`
//! (body to world) and parameterizes small corrections as rotation vectors
//! applied on the right:
//!
//! ```text
//! G ⊞ δ = G · exp(δ^×)          (local / body-frame perturbation)
//! Ga ⊟ Gb = log(Gbᵀ · Ga)
//! ```
//!
//! so `(Gb ⊞ δ) ⊟ Gb = δ` for ‖δ‖ < π. All Jacobians in the filter follow
//! this convention.
//!
//! Numerical notes:
//! - `exp` switches to a truncated Taylor expansion of `sin θ / θ` and
//!   `(1 − cos θ)/θ²` below [`SMALL_ANGLE`] so the Rodrigues form never
//!   divides by a vanishing angle.
//! - `log` has three branches: small-angle (skew part only), the generic
//!   `θ / (2 sin θ)` scaling, and a near-π branch that recovers the axis from
//!   the symmetric part of the matrix. The near-π branch avoids the
//!   catastrophic cancellation of the generic formula when `sin θ → 0`.
//! - Products of many rotations drift away from orthonormality in floating
//!   point. [`Rotation::renormalize`] projects back onto SO(3) via the polar
//!   factor of an SVD; long-running loops call it whenever
//!   `‖GᵀG − I‖_F` exceeds [`ORTHONORMALITY_DRIFT`].

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};

use crate::error::{Error, Result};

/// Below this angle (radians), `exp`/`log` use their Taylor branches.
pub const SMALL_ANGLE: f64 = 1e-8;

/// Frobenius-norm drift of `GᵀG − I` tolerated before renormalization.
pub const ORTHONORMALITY_DRIFT: f64 = 1e-9;

/// Angles closer to π than this use the symmetric-part branch of `log`.
const NEAR_PI: f64 = 1e-4;

/// Skew-symmetric (cross-product) matrix: `skew(v) * w == v × w`.
#[inline]
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(
        0.0, -v.z, v.y, //
        v.z, 0.0, -v.x, //
        -v.y, v.x, 0.0,
    )
}

/// Inverse of [`skew`] on skew-symmetric input; averages the off-diagonal
/// pairs so it is well-defined for slightly asymmetric matrices.
#[inline]
pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(
        0.5 * (m[(2, 1)] - m[(1, 2)]),
        0.5 * (m[(0, 2)] - m[(2, 0)]),
        0.5 * (m[(1, 0)] - m[(0, 1)]),
    )
}

/// A rotation matrix guaranteed (by construction) to stay orthonormal with
/// determinant +1 up to [`ORTHONORMALITY_DRIFT`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(Matrix3<f64>);

impl Default for Rotation {
    fn default() -> Self {
        Self::identity()
    }
}

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Matrix3::identity())
    }

    /// Wraps a matrix that is already orthonormal, renormalizing if it has
    /// drifted slightly. Fails on inputs that are not close to a proper
    /// rotation (rank-deficient or reflecting).
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        if !m.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("rotation matrix entries"));
        }
        let drift = orthonormality_drift(&m);
        if drift <= ORTHONORMALITY_DRIFT {
            return Ok(Rotation(m));
        }
        let projected = polar_factor(&m)?;
        Ok(Rotation(projected))
    }

    /// Wraps a matrix without validation. Only for call sites that already
    /// guarantee orthonormality (e.g. products of `Rotation`s, which are
    /// re-checked by [`Rotation::renormalize`] in long loops).
    #[inline]
    pub fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Rotation(m)
    }

    /// Unit-quaternion constructor (w, x, y, z); normalizes the input.
    pub fn from_quaternion(w: f64, x: f64, y: f64, z: f64) -> Result<Self> {
        let q = Quaternion::new(w, x, y, z);
        if !q.coords.iter().all(|c| c.is_finite()) || q.norm() < 1e-12 {
            return Err(Error::NonFinite("quaternion"));
        }
        let uq = UnitQuaternion::new_normalize(q);
        Ok(Rotation(uq.to_rotation_matrix().into_inner()))
    }

    /// Unit quaternion (w, x, y, z) with w ≥ 0, for serialization.
    pub fn to_quaternion(&self) -> [f64; 4] {
        let uq = UnitQuaternion::from_matrix(&self.0);
        let q = uq.into_inner();
        let s = if q.w < 0.0 { -1.0 } else { 1.0 };
        [s * q.w, s * q.i, s * q.j, s * q.k]
    }

    /// Exponential map: rotation vector θ = angle · axis to rotation matrix,
    /// via the Rodrigues formula.
    pub fn exp(theta: &Vector3<f64>) -> Self {
        let angle = theta.norm();
        let s = skew(theta);
        let s2 = s * s;
        // Coefficients a = sin θ / θ and b = (1 − cos θ)/θ²; Taylor branches
        // keep them finite as θ → 0.
        let (a, b) = if angle < SMALL_ANGLE {
            let t2 = angle * angle;
            (1.0 - t2 / 6.0, 0.5 - t2 / 24.0)
        } else {
            (
                angle.sin() / angle,
                (1.0 - angle.cos()) / (angle * angle),
            )
        };
        Rotation(Matrix3::identity() + s * a + s2 * b)
    }

    /// Logarithmic map: rotation vector with angle in [0, π].
    ///
    /// Never silently renormalizes; garbage input would produce garbage
    /// angles, so validate with [`Rotation::from_matrix`] first if the matrix
    /// comes from outside.
    pub fn log(&self) -> Vector3<f64> {
        let m = &self.0;
        let cos_theta = ((m.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        let theta = cos_theta.acos();
        let w = vee(m); // = sin θ · axis

        if theta < SMALL_ANGLE {
            // sin θ ≈ θ: the skew part already is the rotation vector.
            return w;
        }
        if theta > std::f64::consts::PI - NEAR_PI {
            return near_pi_log(m, theta, cos_theta, &w);
        }
        w * (theta / theta.sin())
    }

    /// Right (local) increment: `self · exp(δ)`.
    #[inline]
    pub fn boxplus(&self, delta: &Vector3<f64>) -> Self {
        // exp(0) multiplies by an exact identity, so boxplus(R, 0) == R
        // bit for bit — the filter relies on that for no-op updates.
        if delta.x == 0.0 && delta.y == 0.0 && delta.z == 0.0 {
            return *self;
        }
        Rotation(self.0 * Rotation::exp(delta).0)
    }

    /// Right (local) difference: `log(otherᵀ · self)`, inverse of
    /// [`Rotation::boxplus`] for differences below π.
    #[inline]
    pub fn boxminus(&self, other: &Rotation) -> Vector3<f64> {
        Rotation(other.0.transpose() * self.0).log()
    }

    /// Geodesic distance to another rotation, in radians.
    #[inline]
    pub fn angle_to(&self, other: &Rotation) -> f64 {
        self.boxminus(other).norm()
    }

    /// Projects back onto SO(3) (polar factor) if floating-point drift has
    /// exceeded [`ORTHONORMALITY_DRIFT`]. Cheap no-op otherwise.
    pub fn renormalize(&mut self) {
        if orthonormality_drift(&self.0) > ORTHONORMALITY_DRIFT {
            // A matrix this close to orthonormal always has full rank.
            self.0 = polar_factor(&self.0).expect("near-orthonormal matrix");
        }
    }

    #[inline]
    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    #[inline]
    pub fn transpose(&self) -> Rotation {
        Rotation(self.0.transpose())
    }

    /// Applies the inverse rotation: `Gᵀ v` (world to body for a body-to-world
    /// rotation).
    #[inline]
    pub fn inv_apply(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0.tr_mul(v)
    }
}

impl std::ops::Mul<Rotation> for Rotation {
    type Output = Rotation;
    #[inline]
    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

impl std::ops::Mul<&Vector3<f64>> for Rotation {
    type Output = Vector3<f64>;
    #[inline]
    fn mul(self, rhs: &Vector3<f64>) -> Vector3<f64> {
        self.0 * rhs
    }
}

/// Validating log for matrices of unverified provenance. Errors instead of
/// silently repairing a matrix that fails the orthonormality check.
pub fn log_so3(m: &Matrix3<f64>) -> Result<Vector3<f64>> {
    let drift = orthonormality_drift(m);
    if drift > ORTHONORMALITY_DRIFT {
        return Err(Error::NonOrthonormal { drift });
    }
    Ok(Rotation(*m).log())
}

/// `‖mᵀm − I‖_F`, the drift measure used by the orthonormality guard.
pub fn orthonormality_drift(m: &Matrix3<f64>) -> f64 {
    (m.tr_mul(m) - Matrix3::identity()).norm()
}

/// Orthogonal polar factor of `m` (the rotation closest to `m` in the
/// Frobenius sense), with the determinant forced to +1.
fn polar_factor(m: &Matrix3<f64>) -> Result<Matrix3<f64>> {
    let svd = m.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(Error::NonOrthonormal { drift: f64::INFINITY }),
    };
    if svd.singular_values.min() < 1e-12 {
        return Err(Error::NonOrthonormal { drift: f64::INFINITY });
    }
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        // Flip the weakest direction to land on a proper rotation.
        let mut u_fixed = u;
        u_fixed.column_mut(2).neg_mut();
        r = u_fixed * v_t;
    }
    Ok(r)
}

/// Log branch for θ within [`NEAR_PI`] of π.
///
/// `(R + Rᵀ)/2 = I + (1 − cos θ)(aaᵀ − I)` is well-conditioned there, so the
/// axis is read off the symmetric part: the largest diagonal fixes one
/// component via a square root, the remaining components come from the same
/// row *linearly* (no square root of a small difference, which would lose
/// half the significant digits). The skew part, though tiny, still carries
/// the sign of `sin θ · a` reliably until θ is within machine precision of π.
fn near_pi_log(m: &Matrix3<f64>, theta: f64, cos_theta: f64, w: &Vector3<f64>) -> Vector3<f64> {
    let b = (m + m.transpose()) * 0.5;
    let one_minus_cos = 1.0 - cos_theta; // ≈ 2, never small here
    let diag = Vector3::new(b[(0, 0)], b[(1, 1)], b[(2, 2)]);
    let k = diag.imax();
    let ak = ((diag[k] - cos_theta) / one_minus_cos).max(0.0).sqrt();
    let mut axis = Vector3::zeros();
    axis[k] = ak;
    for j in 0..3 {
        if j != k {
            axis[j] = b[(k, j)] / (one_minus_cos * ak);
        }
    }
    axis.normalize_mut();
    // Orient along the skew part when it is distinguishable from round-off;
    // at exactly π the sign is genuinely ambiguous (a and −a are the same
    // rotation) and either choice round-trips through exp.
    let dot = w.dot(&axis);
    let sign = if dot.abs() > 1e-12 {
        dot.signum()
    } else if axis[axis.iamax()] < 0.0 {
        -1.0
    } else {
        1.0
    };
    axis * (sign * theta)
}
