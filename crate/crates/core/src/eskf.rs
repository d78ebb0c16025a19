//! Error-state Kalman filter over the 39-dim state of [`crate::state`].
//!
//! The nominal state is propagated nonlinearly (RK4, zero-order-hold IMU);
//! uncertainty lives in the error state, whose continuous-time linearization
//! is discretized with a truncated matrix series and a trapezoidal noise
//! integral. Leg-kinematic measurements come in two flavors:
//!
//! * **point contact** — the classical stationary-foot assumption (6 rows per
//!   stance foot: relative foot position and body velocity), and
//! * **rolling** — the same rows written against an explicit foot-velocity
//!   state, plus a rolling pseudo-measurement that ties the foot velocity to
//!   the foot's angular velocity and effective contact radius (9 rows).
//!
//! All stance feet observed at one timestamp are stacked into a single update
//! so the correction uses one linearization point. Swing feet contribute no
//! rows: their error blocks are frozen and re-primed at touchdown.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{
    contact_radius, foot_angular_velocity, forward_kinematics, jacobian, LegParams, LEG_COUNT,
};
use crate::so3::{skew, Rotation};
use crate::state::{layout, ImuSample, LegObservation, LegSample, RobotState};

/// Width of the continuous-time process-noise vector:
/// accel (3) + gyro (3) + per-foot velocity (4×3) + the two bias walks (3+3).
pub const NOISE_DIM: usize = 24;

/// Continuous-time noise densities and per-constraint measurement variances.
///
/// `q_vf` is the foot-velocity process-noise density for the nominal rolling
/// mode; slip modes scale it by `α ≥ 1` (see [`process_noise`]). The matrix is
/// stored row-major as three rows so config files stay human-readable.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    /// Accelerometer white-noise density, (m/s²)/√Hz.
    pub sigma_a: f64,
    /// Gyroscope white-noise density, (rad/s)/√Hz.
    pub sigma_w: f64,
    /// Accelerometer bias random-walk density, (m/s³)/√Hz.
    pub sigma_ba: f64,
    /// Gyroscope bias random-walk density, (rad/s²)/√Hz.
    pub sigma_bw: f64,
    /// Foot-velocity process-noise density (3×3, row-major), (m/s²)²·s.
    pub q_vf: [[f64; 3]; 3],
    /// Relative-foot-position measurement variance, m².
    pub r_pos: f64,
    /// Body-velocity measurement variance, (m/s)².
    pub r_vel: f64,
    /// Rolling-constraint pseudo-measurement variance, (m/s)².
    pub r_roll: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            sigma_a: 1e-2,
            sigma_w: 1e-3,
            sigma_ba: 1e-4,
            sigma_bw: 1e-5,
            q_vf: [[1e-3, 0.0, 0.0], [0.0, 1e-3, 0.0], [0.0, 0.0, 1e-3]],
            r_pos: 1e-4,
            // Sized for joint rates obtained by filtered numerical
            // differentiation of the encoders (~0.1 rad/s through a ~0.3 m
            // leg). Velocity-level rows live at this scale on purpose:
            // tighter, and they veto any foot-velocity excursion for every
            // mode of a bank (inflated process noise or not); much softer,
            // and they stop resisting foot slides at all.
            r_vel: 1e-3,
            r_roll: 1e-3,
        }
    }
}

impl NoiseConfig {
    pub fn q_vf_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            self.q_vf[0][0],
            self.q_vf[0][1],
            self.q_vf[0][2],
            self.q_vf[1][0],
            self.q_vf[1][1],
            self.q_vf[1][2],
            self.q_vf[2][0],
            self.q_vf[2][1],
            self.q_vf[2][2],
        )
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("noise.sigma_a", self.sigma_a),
            ("noise.sigma_w", self.sigma_w),
            ("noise.sigma_ba", self.sigma_ba),
            ("noise.sigma_bw", self.sigma_bw),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        for (name, v) in [
            ("noise.r_pos", self.r_pos),
            ("noise.r_vel", self.r_vel),
            ("noise.r_roll", self.r_roll),
        ] {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::Config(format!(
                    "{name} must be finite and positive, got {v}"
                )));
            }
        }
        let q = self.q_vf_matrix();
        if !q.iter().all(|x| x.is_finite()) {
            return Err(Error::Config("noise.q_vf has non-finite entries".into()));
        }
        if (q - q.transpose()).amax() > 1e-12 {
            return Err(Error::Config("noise.q_vf must be symmetric".into()));
        }
        let eig = nalgebra::SymmetricEigen::new(q).eigenvalues;
        if eig.min() < -1e-12 {
            return Err(Error::Config(format!(
                "noise.q_vf must be positive semi-definite (min eigenvalue {:.3e})",
                eig.min()
            )));
        }
        Ok(())
    }
}

/// Initial error-state standard variances, one scalar per block (applied to
/// each of the block's three diagonal entries).
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct InitialVariances {
    pub pos: f64,
    pub vel: f64,
    pub att: f64,
    pub foot_pos: f64,
    pub foot_vel: f64,
    pub accel_bias: f64,
    pub gyro_bias: f64,
}

impl Default for InitialVariances {
    fn default() -> Self {
        InitialVariances {
            pos: 1e-4,
            vel: 1e-4,
            att: 1e-4,
            foot_pos: 1e-4,
            foot_vel: 1e-4,
            accel_bias: 1e-4,
            gyro_bias: 1e-6,
        }
    }
}

/// Everything the filter needs besides the incoming samples.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    pub noise: NoiseConfig,
    /// Gravity in the world frame, m/s².
    pub gravity: [f64; 3],
    /// Largest accepted propagation step; larger gaps are rejected so a hole
    /// in a log cannot be silently integrated over.
    pub max_dt: f64,
    /// Truncation order of the state-transition series Γ = Σ (A·dt)^k / k!.
    pub gamma_order: u32,
    /// Ground normal used for the rolling contact radius (unit vector).
    pub contact_normal: [f64; 3],
    pub init: InitialVariances,
    /// Foot-position variance installed at touchdown, m².
    pub touchdown_pos_var: f64,
    /// Foot-velocity variance installed at touchdown, (m/s)².
    pub touchdown_vel_var: f64,
    /// Updates are skipped (and flagged) when the innovation covariance's
    /// condition estimate exceeds this.
    pub cond_max: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            noise: NoiseConfig::default(),
            gravity: [0.0, 0.0, -9.81],
            max_dt: 0.02,
            gamma_order: 2,
            contact_normal: [0.0, 0.0, 1.0],
            init: InitialVariances::default(),
            touchdown_pos_var: 1e2,
            touchdown_vel_var: 1e0,
            cond_max: 1e12,
        }
    }
}

impl FilterConfig {
    pub fn gravity_vector(&self) -> Vector3<f64> {
        Vector3::from(self.gravity)
    }

    pub fn contact_normal_vector(&self) -> Vector3<f64> {
        Vector3::from(self.contact_normal)
    }

    pub fn validate(&self) -> Result<()> {
        self.noise.validate()?;
        if !self.gravity.iter().all(|x| x.is_finite()) {
            return Err(Error::Config("filter.gravity must be finite".into()));
        }
        if !(self.max_dt > 0.0 && self.max_dt.is_finite()) {
            return Err(Error::Config(format!(
                "filter.max_dt must be positive, got {}",
                self.max_dt
            )));
        }
        if self.gamma_order < 1 {
            return Err(Error::Config("filter.gamma_order must be at least 1".into()));
        }
        let n = self.contact_normal_vector().norm();
        if !((n - 1.0).abs() < 1e-6) {
            return Err(Error::Config(format!(
                "filter.contact_normal must be a unit vector (norm {n})"
            )));
        }
        let iv = &self.init;
        for (name, v) in [
            ("filter.init.pos", iv.pos),
            ("filter.init.vel", iv.vel),
            ("filter.init.att", iv.att),
            ("filter.init.foot_pos", iv.foot_pos),
            ("filter.init.foot_vel", iv.foot_vel),
            ("filter.init.accel_bias", iv.accel_bias),
            ("filter.init.gyro_bias", iv.gyro_bias),
            ("filter.touchdown_pos_var", self.touchdown_pos_var),
            ("filter.touchdown_vel_var", self.touchdown_vel_var),
        ] {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::Config(format!(
                    "{name} must be finite and positive, got {v}"
                )));
            }
        }
        if !(self.cond_max > 1.0) {
            return Err(Error::Config("filter.cond_max must exceed 1".into()));
        }
        Ok(())
    }
}

/// Removes the current bias estimates from a raw IMU reading.
pub fn debias_imu(imu: &ImuSample, state: &RobotState) -> (Vector3<f64>, Vector3<f64>) {
    (imu.gyro - state.gyro_bias, imu.accel - state.accel_bias)
}

/// Integrates the nominal dynamics over one IMU interval with RK4 under a
/// zero-order hold: ṗ = v, v̇ = R·â + g, Ṙ = R(ω̂)×, ḟ = v_f, v̇_f = 0,
/// ḃ = 0. The rotation advances on the manifold (exactly, since ω̂ is held
/// constant); feet integrate exactly as well, so RK4 only matters for (p, v).
pub fn propagate_nominal(
    state: &RobotState,
    imu: &ImuSample,
    dt: f64,
    gravity: &Vector3<f64>,
) -> Result<RobotState> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::InvalidDt {
            dt,
            reason: "propagation step must be positive and finite",
        });
    }
    if !imu.is_finite() {
        return Err(Error::NonFinite("imu sample"));
    }

    let (gyro, accel) = debias_imu(imu, state);
    let rot_half = state.rot.boxplus(&(gyro * (dt / 2.0)));
    let rot_full = state.rot.boxplus(&(gyro * dt));

    // World-frame acceleration at the RK4 stage times.
    let a0 = state.rot * &accel + gravity;
    let ah = rot_half * &accel + gravity;
    let af = rot_full * &accel + gravity;

    let k1p = state.vel;
    let k2p = state.vel + (dt / 2.0) * a0;
    let k3p = state.vel + (dt / 2.0) * ah;
    let k4p = state.vel + dt * ah;

    let mut next = state.clone();
    next.pos += (dt / 6.0) * (k1p + 2.0 * k2p + 2.0 * k3p + k4p);
    next.vel += (dt / 6.0) * (a0 + 4.0 * ah + af);
    next.rot = rot_full;
    for l in 0..LEG_COUNT {
        next.foot_pos[l] += state.foot_vel[l] * dt;
    }
    Ok(next)
}

/// Continuous-time error dynamics `δẋ = A·δx + B_w·w` linearized about the
/// nominal state, with the right-perturbation attitude convention. The noise
/// vector is ordered (n_a, n_ω, n_vf×4, n_ba, n_bω) — 24 wide, matching
/// [`process_noise`].
pub fn error_dynamics_matrices(
    state: &RobotState,
    imu: &ImuSample,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let (gyro, accel) = debias_imu(imu, state);
    let r = state.rot.matrix();

    let mut a = DMatrix::<f64>::zeros(layout::DIM, layout::DIM);
    let set = |m: &mut DMatrix<f64>, row: usize, col: usize, block: &Matrix3<f64>| {
        m.fixed_view_mut::<3, 3>(row, col).copy_from(block);
    };

    let eye = Matrix3::identity();
    set(&mut a, layout::P, layout::V, &eye);
    set(&mut a, layout::V, layout::TH, &(-r * skew(&accel)));
    set(&mut a, layout::V, layout::BA, &(-r));
    set(&mut a, layout::TH, layout::TH, &(-skew(&gyro)));
    set(&mut a, layout::TH, layout::BW, &(-eye));
    for l in 0..LEG_COUNT {
        set(&mut a, layout::foot(l), layout::foot_vel(l), &eye);
    }

    let mut b = DMatrix::<f64>::zeros(layout::DIM, NOISE_DIM);
    set(&mut b, layout::V, 0, &(-r));
    set(&mut b, layout::TH, 3, &(-eye));
    for l in 0..LEG_COUNT {
        set(&mut b, layout::foot_vel(l), 6 + 3 * l, &eye);
    }
    set(&mut b, layout::BA, 18, &eye);
    set(&mut b, layout::BW, 21, &eye);

    (a, b)
}

/// Continuous-time process-noise density (24×24, block diagonal). `alpha`
/// scales only the four foot-velocity blocks — it is the slip mode's knob.
pub fn process_noise(noise: &NoiseConfig, alpha: f64) -> DMatrix<f64> {
    let mut q = DMatrix::<f64>::zeros(NOISE_DIM, NOISE_DIM);
    let set_diag = |q: &mut DMatrix<f64>, start: usize, v: f64| {
        for i in 0..3 {
            q[(start + i, start + i)] = v;
        }
    };
    set_diag(&mut q, 0, noise.sigma_a * noise.sigma_a);
    set_diag(&mut q, 3, noise.sigma_w * noise.sigma_w);
    let qvf = noise.q_vf_matrix() * alpha;
    for l in 0..LEG_COUNT {
        q.fixed_view_mut::<3, 3>(6 + 3 * l, 6 + 3 * l).copy_from(&qvf);
    }
    set_diag(&mut q, 18, noise.sigma_ba * noise.sigma_ba);
    set_diag(&mut q, 21, noise.sigma_bw * noise.sigma_bw);
    q
}

/// Discretizes the error dynamics over `dt`: Γ from the truncated series
/// `Σ_{k≤order} (A·dt)^k / k!`, and Q_d from the trapezoidal rule
/// `½(Γ·M·Γᵀ + M)·dt` with `M = B_w·Q·B_wᵀ`, symmetrized.
pub fn discretize(
    a: &DMatrix<f64>,
    b_w: &DMatrix<f64>,
    q_cont: &DMatrix<f64>,
    dt: f64,
    order: u32,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::InvalidDt {
            dt,
            reason: "discretization step must be positive and finite",
        });
    }
    let n = a.nrows();
    let mut gamma = DMatrix::<f64>::identity(n, n);
    let mut term = DMatrix::<f64>::identity(n, n);
    for k in 1..=order.max(1) {
        term = (a * &term) * (dt / k as f64);
        gamma += &term;
    }
    let m = b_w * q_cont * b_w.transpose();
    let qd = (&gamma * &m * gamma.transpose() + &m) * (dt / 2.0);
    let qd = (&qd + qd.transpose()) * 0.5;
    Ok((gamma, qd))
}

/// Which residual rows a stance foot contributes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContactModel {
    /// Stationary-foot assumption: 6 rows per stance foot.
    PointContact,
    /// Foot-velocity-aware model with the rolling pseudo-measurement:
    /// 9 rows per stance foot.
    Rolling,
}

/// A residual with its Jacobian (rows × 39) and diagonal noise, for one foot
/// or for several feet stacked.
#[derive(Debug, Clone)]
pub struct Measurement {
    pub residual: DVector<f64>,
    pub jacobian: DMatrix<f64>,
    pub noise_diag: DVector<f64>,
}

impl Measurement {
    pub fn rows(&self) -> usize {
        self.residual.len()
    }

    /// Vertically concatenates measurement blocks taken at one timestamp.
    pub fn stack(blocks: &[Measurement]) -> Option<Measurement> {
        if blocks.is_empty() {
            return None;
        }
        let rows: usize = blocks.iter().map(|b| b.rows()).sum();
        let mut residual = DVector::zeros(rows);
        let mut jacobian = DMatrix::zeros(rows, layout::DIM);
        let mut noise_diag = DVector::zeros(rows);
        let mut at = 0;
        for b in blocks {
            let r = b.rows();
            residual.rows_mut(at, r).copy_from(&b.residual);
            jacobian.view_mut((at, 0), (r, layout::DIM)).copy_from(&b.jacobian);
            noise_diag.rows_mut(at, r).copy_from(&b.noise_diag);
            at += r;
        }
        Some(Measurement { residual, jacobian, noise_diag })
    }
}

/// Point-contact rows for one stance foot: predicted body-frame foot offset
/// `R̂ᵀ(f̂−p̂)` against forward kinematics, and predicted body-frame velocity
/// `R̂ᵀv̂` against the leg-odometry value `−J(φ)φ̇ − ω̂×ζ(φ)`.
///
/// `gyro` must already be bias-corrected. Returns `None` for a swing foot.
pub fn measurement_point_contact(
    state: &RobotState,
    obs: &LegObservation,
    leg: &LegParams,
    foot: usize,
    gyro: &Vector3<f64>,
    noise: &NoiseConfig,
) -> Option<Measurement> {
    if !obs.contact {
        return None;
    }
    let zeta = forward_kinematics(&obs.joints, leg);
    let jac = jacobian(&obs.joints, leg);

    let y_pos = zeta;
    let y_vel = -jac * obs.joints.dq - gyro.cross(&zeta);

    let rt = state.rot.transpose();
    let h_pos = rt * &(state.foot_pos[foot] - state.pos);
    let h_vel = rt * &state.vel;

    let mut residual = DVector::zeros(6);
    residual.fixed_rows_mut::<3>(0).copy_from(&(y_pos - h_pos));
    residual.fixed_rows_mut::<3>(3).copy_from(&(y_vel - h_vel));

    let mut h = DMatrix::zeros(6, layout::DIM);
    let rt_m = rt.matrix();
    h.fixed_view_mut::<3, 3>(0, layout::P).copy_from(&(-rt_m));
    h.fixed_view_mut::<3, 3>(0, layout::TH).copy_from(&skew(&h_pos));
    h.fixed_view_mut::<3, 3>(0, layout::foot(foot)).copy_from(rt_m);
    h.fixed_view_mut::<3, 3>(3, layout::V).copy_from(rt_m);
    h.fixed_view_mut::<3, 3>(3, layout::TH).copy_from(&skew(&h_vel));

    let mut noise_diag = DVector::zeros(6);
    for i in 0..3 {
        noise_diag[i] = noise.r_pos;
        noise_diag[3 + i] = noise.r_vel;
    }
    Some(Measurement { residual, jacobian: h, noise_diag })
}

/// Rolling-aware rows for one stance foot: the point-contact position rows,
/// body velocity measured relative to the foot velocity `R̂ᵀ(v̂−v̂_f)`, and
/// the rolling pseudo-measurement `0 = v̂_f − ω_f×r`.
///
/// `ω_f` is evaluated from leg kinematics with the rotation `r_body` (the
/// linearization point, normally the state's own orientation) and the
/// bias-corrected `gyro`. It enters as an exogenous input: the Jacobian
/// carries no δΘ/δb_ω sensitivity through it, and that approximation's
/// uncertainty is folded into `r_roll`.
pub fn measurement_rolling(
    state: &RobotState,
    obs: &LegObservation,
    leg: &LegParams,
    foot: usize,
    gyro: &Vector3<f64>,
    r_body: &Rotation,
    contact_normal: &Vector3<f64>,
    noise: &NoiseConfig,
) -> Option<Measurement> {
    if !obs.contact {
        return None;
    }
    let zeta = forward_kinematics(&obs.joints, leg);
    let jac = jacobian(&obs.joints, leg);

    let y_pos = zeta;
    let y_vel = -jac * obs.joints.dq - gyro.cross(&zeta);

    let rt = state.rot.transpose();
    let h_pos = rt * &(state.foot_pos[foot] - state.pos);
    let h_vel = rt * &(state.vel - state.foot_vel[foot]);

    let omega_f = foot_angular_velocity(&obs.joints, gyro, r_body, leg);
    let radius = contact_radius(contact_normal, leg.r_foot);
    let h_roll = state.foot_vel[foot] - omega_f.cross(&radius);

    let mut residual = DVector::zeros(9);
    residual.fixed_rows_mut::<3>(0).copy_from(&(y_pos - h_pos));
    residual.fixed_rows_mut::<3>(3).copy_from(&(y_vel - h_vel));
    residual.fixed_rows_mut::<3>(6).copy_from(&(-h_roll));

    let mut h = DMatrix::zeros(9, layout::DIM);
    let rt_m = rt.matrix();
    h.fixed_view_mut::<3, 3>(0, layout::P).copy_from(&(-rt_m));
    h.fixed_view_mut::<3, 3>(0, layout::TH).copy_from(&skew(&h_pos));
    h.fixed_view_mut::<3, 3>(0, layout::foot(foot)).copy_from(rt_m);
    h.fixed_view_mut::<3, 3>(3, layout::V).copy_from(rt_m);
    h.fixed_view_mut::<3, 3>(3, layout::TH).copy_from(&skew(&h_vel));
    h.fixed_view_mut::<3, 3>(3, layout::foot_vel(foot)).copy_from(&(-rt_m));
    h.fixed_view_mut::<3, 3>(6, layout::foot_vel(foot))
        .copy_from(&Matrix3::identity());

    let mut noise_diag = DVector::zeros(9);
    for i in 0..3 {
        noise_diag[i] = noise.r_pos;
        noise_diag[3 + i] = noise.r_vel;
        noise_diag[6 + i] = noise.r_roll;
    }
    Some(Measurement { residual, jacobian: h, noise_diag })
}

/// Builds the stacked measurement for every stance foot in `sample`, in leg
/// order. `raw_gyro` is the latest uncorrected IMU rate; it is debiased with
/// the state passed in, so each IMM mode linearizes about its own bias.
/// Returns `None` when no foot is in contact.
pub fn stack_foot_measurements(
    state: &RobotState,
    sample: &LegSample,
    model: ContactModel,
    legs: &[LegParams; LEG_COUNT],
    raw_gyro: &Vector3<f64>,
    contact_normal: &Vector3<f64>,
    noise: &NoiseConfig,
) -> Option<Measurement> {
    let gyro = raw_gyro - state.gyro_bias;
    let mut blocks = Vec::with_capacity(LEG_COUNT);
    for (foot, obs) in sample.legs.iter().enumerate() {
        let block = match model {
            ContactModel::PointContact => {
                measurement_point_contact(state, obs, &legs[foot], foot, &gyro, noise)
            }
            ContactModel::Rolling => measurement_rolling(
                state,
                obs,
                &legs[foot],
                foot,
                &gyro,
                &state.rot,
                contact_normal,
                noise,
            ),
        };
        if let Some(b) = block {
            blocks.push(b);
        }
    }
    Measurement::stack(&blocks)
}

/// What an update attempt produced. `applied == false` means the innovation
/// covariance failed its conditioning guard and the state was left untouched;
/// the residual and S are still reported for diagnostics/likelihoods.
#[derive(Debug, Clone)]
pub struct UpdateOutcome {
    pub applied: bool,
    pub residual: DVector<f64>,
    pub innovation_cov: DMatrix<f64>,
    /// Condition estimate of S from its Cholesky factor (squared diagonal
    /// ratio) — a cheap lower bound, infinite when factorization fails.
    pub cond_estimate: f64,
}

/// The error-state Kalman filter: nominal state + error covariance + config.
#[derive(Debug, Clone)]
pub struct Eskf {
    pub state: RobotState,
    pub cov: DMatrix<f64>,
    pub config: FilterConfig,
}

impl Eskf {
    /// Starts the filter at `state` with the configured diagonal covariance.
    pub fn new(state: RobotState, config: FilterConfig) -> Eskf {
        let iv = &config.init;
        let mut cov = DMatrix::<f64>::zeros(layout::DIM, layout::DIM);
        let mut set = |start: usize, v: f64| {
            for i in 0..3 {
                cov[(start + i, start + i)] = v;
            }
        };
        set(layout::P, iv.pos);
        set(layout::V, iv.vel);
        set(layout::TH, iv.att);
        for l in 0..LEG_COUNT {
            set(layout::foot(l), iv.foot_pos);
            set(layout::foot_vel(l), iv.foot_vel);
        }
        set(layout::BA, iv.accel_bias);
        set(layout::BW, iv.gyro_bias);
        Eskf { state, cov, config }
    }

    /// Propagates nominal state and covariance over one IMU interval.
    /// `alpha` is the foot-velocity noise scale of the active mode.
    pub fn predict(&mut self, imu: &ImuSample, dt: f64, alpha: f64) -> Result<()> {
        if dt > self.config.max_dt {
            return Err(Error::InvalidDt {
                dt,
                reason: "exceeds the configured maximum propagation step (log gap?)",
            });
        }
        let (a, b_w) = error_dynamics_matrices(&self.state, imu);
        let q_cont = process_noise(&self.config.noise, alpha);
        let (gamma, q_d) = discretize(&a, &b_w, &q_cont, dt, self.config.gamma_order)?;

        self.state = propagate_nominal(&self.state, imu, dt, &self.config.gravity_vector())?;
        self.state.rot.renormalize();
        if !self.state.is_finite() {
            return Err(Error::NonFiniteState { t: imu.t, what: "predicted state" });
        }

        self.cov = &gamma * &self.cov * gamma.transpose() + q_d;
        self.cov = (&self.cov + self.cov.transpose()) * 0.5;
        Ok(())
    }

    /// Joseph-form correction. Skips (without touching the state) when S is
    /// ill-conditioned, reporting the attempt in the returned outcome.
    pub fn update(&mut self, meas: &Measurement) -> UpdateOutcome {
        let h = &meas.jacobian;
        let r_mat = DMatrix::from_diagonal(&meas.noise_diag);

        let hp = h * &self.cov;
        let s = &hp * h.transpose() + &r_mat;
        let s = (&s + s.transpose()) * 0.5;

        let chol = match nalgebra::Cholesky::new(s.clone()) {
            Some(c) => c,
            None => {
                return UpdateOutcome {
                    applied: false,
                    residual: meas.residual.clone(),
                    innovation_cov: s,
                    cond_estimate: f64::INFINITY,
                };
            }
        };
        let diag = chol.l_dirty().diagonal();
        let (dmin, dmax) = (diag.min(), diag.max());
        let cond = (dmax / dmin).powi(2);
        if !cond.is_finite() || cond > self.config.cond_max {
            return UpdateOutcome {
                applied: false,
                residual: meas.residual.clone(),
                innovation_cov: s,
                cond_estimate: cond,
            };
        }

        // K = P Hᵀ S⁻¹, computed as (S⁻¹ H P)ᵀ through the Cholesky solve.
        let k = chol.solve(&hp).transpose();
        let delta = &k * &meas.residual;
        self.state.inject(&delta);
        self.state.rot.renormalize();

        let i_kh = DMatrix::<f64>::identity(layout::DIM, layout::DIM) - &k * h;
        self.cov = &i_kh * &self.cov * i_kh.transpose() + &k * &r_mat * k.transpose();
        self.cov = (&self.cov + self.cov.transpose()) * 0.5;

        UpdateOutcome {
            applied: true,
            residual: meas.residual.clone(),
            innovation_cov: s,
            cond_estimate: cond,
        }
    }

    /// Handles stance-flag edges between two consecutive leg samples. At a
    /// touchdown the foot state is re-primed from forward kinematics (foot
    /// velocity to zero) and its covariance blocks reset to a wide diagonal
    /// prior with no cross-correlation; a lift-off changes nothing (swing
    /// feet simply stop contributing measurement rows).
    pub fn on_contact_transition(
        &mut self,
        prev_flags: &[bool; LEG_COUNT],
        sample: &LegSample,
        legs: &[LegParams; LEG_COUNT],
    ) {
        for foot in 0..LEG_COUNT {
            let now = sample.legs[foot].contact;
            if now && !prev_flags[foot] {
                let zeta = forward_kinematics(&sample.legs[foot].joints, &legs[foot]);
                self.state.foot_pos[foot] = self.state.pos + self.state.rot * &zeta;
                self.state.foot_vel[foot] = Vector3::zeros();
                self.reset_foot_cov(foot);
            }
        }
    }

    fn reset_foot_cov(&mut self, foot: usize) {
        let n = layout::DIM;
        for (start, var) in [
            (layout::foot(foot), self.config.touchdown_pos_var),
            (layout::foot_vel(foot), self.config.touchdown_vel_var),
        ] {
            for i in start..start + 3 {
                for j in 0..n {
                    self.cov[(i, j)] = 0.0;
                    self.cov[(j, i)] = 0.0;
                }
            }
            for i in start..start + 3 {
                self.cov[(i, i)] = var;
            }
        }
    }

    pub fn trace_cov(&self) -> f64 {
        self.cov.trace()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::{default_legs, inverse_kinematics, JointState};
    use approx::assert_relative_eq;
    use nalgebra::Matrix2;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn gravity() -> Vector3<f64> {
        Vector3::new(0.0, 0.0, -9.81)
    }

    fn random_state(rng: &mut StdRng) -> RobotState {
        let mut v3 = |scale: f64| {
            Vector3::new(
                rng.random_range(-scale..scale),
                rng.random_range(-scale..scale),
                rng.random_range(-scale..scale),
            )
        };
        let mut s = RobotState::default();
        s.pos = v3(2.0);
        s.vel = v3(1.0);
        s.rot = Rotation::exp(&v3(1.0));
        for l in 0..LEG_COUNT {
            s.foot_pos[l] = s.pos + v3(0.4);
            s.foot_vel[l] = v3(0.2);
        }
        s.accel_bias = v3(0.05);
        s.gyro_bias = v3(0.01);
        s
    }

    fn random_imu(rng: &mut StdRng, t: f64) -> ImuSample {
        let mut v3 = |scale: f64| {
            Vector3::new(
                rng.random_range(-scale..scale),
                rng.random_range(-scale..scale),
                rng.random_range(-scale..scale),
            )
        };
        ImuSample { t, gyro: v3(0.8), accel: v3(3.0) + Vector3::new(0.0, 0.0, 9.81) }
    }

    #[test]
    fn debias_subtracts_current_estimates() {
        let mut state = RobotState::default();
        let imu = ImuSample {
            t: 0.0,
            gyro: Vector3::new(0.1, 0.0, 0.0),
            accel: Vector3::new(0.0, 0.0, 9.91),
        };
        let (w, a) = debias_imu(&imu, &state);
        assert_eq!(w, imu.gyro);
        assert_eq!(a, imu.accel);

        state.gyro_bias = Vector3::new(0.1, 0.0, 0.0);
        state.accel_bias = Vector3::new(0.0, 0.0, 0.10);
        let (w, a) = debias_imu(&imu, &state);
        assert_eq!(w, Vector3::zeros());
        assert_eq!(a, Vector3::new(0.0, 0.0, 9.81));
    }

    #[test]
    fn propagate_static_equilibrium_is_a_fixed_point() {
        let state = RobotState::default();
        let imu = ImuSample { t: 0.0, gyro: Vector3::zeros(), accel: Vector3::new(0.0, 0.0, 9.81) };
        let next = propagate_nominal(&state, &imu, 0.01, &gravity()).unwrap();
        assert_eq!(next.pos, state.pos);
        assert_eq!(next.vel, state.vel);
        assert_eq!(next.rot.matrix(), state.rot.matrix());
    }

    #[test]
    fn propagate_constant_velocity_is_exact() {
        let mut state = RobotState::default();
        state.vel = Vector3::new(1.0, 0.0, 0.0);
        let imu = ImuSample { t: 0.0, gyro: Vector3::zeros(), accel: Vector3::new(0.0, 0.0, 9.81) };
        let next = propagate_nominal(&state, &imu, 0.5, &gravity()).unwrap();
        assert_eq!(next.pos, Vector3::new(0.5, 0.0, 0.0));
        assert_eq!(next.vel, state.vel);
    }

    #[test]
    fn propagate_constant_rate_matches_closed_form_rotation() {
        let mut state = RobotState::default();
        let imu = ImuSample { t: 0.0, gyro: Vector3::new(0.0, 0.0, 1.0), accel: Vector3::new(0.0, 0.0, 9.81) };
        for _ in 0..1000 {
            state = propagate_nominal(&state, &imu, 0.001, &gravity()).unwrap();
        }
        let expected = Rotation::exp(&Vector3::new(0.0, 0.0, 1.0));
        assert!(state.rot.angle_to(&expected) < 1e-9);
    }

    #[test]
    fn propagate_rejects_bad_dt_and_non_finite_imu() {
        let state = RobotState::default();
        let imu = ImuSample { t: 0.0, gyro: Vector3::zeros(), accel: Vector3::zeros() };
        assert!(propagate_nominal(&state, &imu, 0.0, &gravity()).is_err());
        assert!(propagate_nominal(&state, &imu, -0.01, &gravity()).is_err());
        assert!(propagate_nominal(&state, &imu, f64::NAN, &gravity()).is_err());
        let bad = ImuSample { t: 0.0, gyro: Vector3::new(f64::NAN, 0.0, 0.0), accel: Vector3::zeros() };
        assert!(propagate_nominal(&state, &bad, 0.01, &gravity()).is_err());
    }

    /// Central-difference oracle for the continuous error dynamics: the local
    /// derivative map is recovered from the short-time flow,
    /// g(δ) = [Φ(x ⊞ δ, dt) ⊟ Φ(x, dt)], column i ≈ (g(+εe_i) − g(−εe_i)) / 2ε,
    /// then A ≈ (that − I)/dt with dt small enough that A²dt/2 is negligible.
    #[test]
    fn error_dynamics_match_finite_difference_of_propagation() {
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..5 {
            let state = random_state(&mut rng);
            let imu = random_imu(&mut rng, 0.0);
            let (a, _) = error_dynamics_matrices(&state, &imu);

            let dt = 1e-6;
            let eps = 1e-3;
            let g = gravity();
            let base = propagate_nominal(&state, &imu, dt, &g).unwrap();

            let mut a_fd = DMatrix::<f64>::zeros(layout::DIM, layout::DIM);
            for i in 0..layout::DIM {
                let mut dplus = DVector::zeros(layout::DIM);
                dplus[i] = eps;
                let mut dminus = DVector::zeros(layout::DIM);
                dminus[i] = -eps;

                let mut xp = state.clone();
                xp.inject(&dplus);
                let mut xm = state.clone();
                xm.inject(&dminus);

                let fp = propagate_nominal(&xp, &imu, dt, &g).unwrap().boxminus(&base);
                let fm = propagate_nominal(&xm, &imu, dt, &g).unwrap().boxminus(&base);
                let col = (fp - fm) / (2.0 * eps);
                for r in 0..layout::DIM {
                    let gamma_entry = col[r];
                    let identity = if r == i { 1.0 } else { 0.0 };
                    a_fd[(r, i)] = (gamma_entry - identity) / dt;
                }
            }

            let diff = (&a - &a_fd).amax();
            assert!(diff < 1e-4, "A mismatch vs finite differences: {diff:.3e}");
        }
    }

    #[test]
    fn dynamics_attitude_block_vanishes_for_zero_inputs() {
        let state = RobotState::default();
        let imu = ImuSample { t: 0.0, gyro: Vector3::zeros(), accel: Vector3::zeros() };
        let (a, _) = error_dynamics_matrices(&state, &imu);
        assert_eq!(a.view((layout::V, layout::TH), (3, 3)).amax(), 0.0);
        assert_eq!(a.view((layout::TH, layout::TH), (3, 3)).amax(), 0.0);
        assert_eq!(
            a.view((layout::P, layout::V), (3, 3)),
            DMatrix::identity(3, 3).view((0, 0), (3, 3))
        );
    }

    #[test]
    fn discretize_trivial_cases() {
        let n = 4;
        let a = DMatrix::<f64>::zeros(n, n);
        let b = DMatrix::<f64>::identity(n, n);
        let q = DMatrix::<f64>::identity(n, n) * 0.3;
        let (gamma, qd) = discretize(&a, &b, &q, 0.01, 2).unwrap();
        assert_eq!(gamma, DMatrix::identity(n, n));
        assert_relative_eq!(qd, &b * &q * b.transpose() * 0.01, epsilon = 1e-15);

        let qz = DMatrix::<f64>::zeros(n, n);
        let (_, qd0) = discretize(&a, &b, &qz, 0.01, 2).unwrap();
        assert_eq!(qd0.amax(), 0.0);
    }

    /// Double-integrator cross-check: the exact noise integral (Van Loan)
    /// for A=[[0,1],[0,0]], B=[0,1]ᵀ, scalar density q is
    /// q·[[dt³/3, dt²/2], [dt²/2, dt]]. The trapezoidal rule's (0,0) entry
    /// differs by q·dt³/6, far below tolerance at this step size.
    #[test]
    fn discretize_matches_van_loan_on_double_integrator() {
        let dt = 1e-4;
        let q_scalar = 1.0;
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let q = DMatrix::from_element(1, 1, q_scalar);

        let (gamma, qd) = discretize(&a, &b, &q, dt, 2).unwrap();
        // A² = 0, so the truncated series is exact: Γ = [[1, dt], [0, 1]].
        assert_eq!(gamma[(0, 0)], 1.0);
        assert_eq!(gamma[(0, 1)], dt);
        assert_eq!(gamma[(1, 0)], 0.0);
        assert_eq!(gamma[(1, 1)], 1.0);

        let van_loan = Matrix2::new(
            q_scalar * dt.powi(3) / 3.0,
            q_scalar * dt * dt / 2.0,
            q_scalar * dt * dt / 2.0,
            q_scalar * dt,
        );
        for i in 0..2 {
            for j in 0..2 {
                assert!(
                    (qd[(i, j)] - van_loan[(i, j)]).abs() < 1e-10,
                    "Q_d[{i},{j}] = {} vs Van Loan {}",
                    qd[(i, j)],
                    van_loan[(i, j)]
                );
            }
        }
    }

    #[test]
    fn process_noise_alpha_scales_only_foot_velocity_blocks() {
        let noise = NoiseConfig::default();
        let q1 = process_noise(&noise, 1.0);
        let q100 = process_noise(&noise, 100.0);
        for l in 0..LEG_COUNT {
            let s = 6 + 3 * l;
            for i in 0..3 {
                assert_relative_eq!(q100[(s + i, s + i)], 100.0 * q1[(s + i, s + i)]);
            }
        }
        let mut masked1 = q1.clone();
        let mut masked100 = q100.clone();
        for l in 0..LEG_COUNT {
            let s = 6 + 3 * l;
            masked1.view_mut((s, s), (3, 3)).fill(0.0);
            masked100.view_mut((s, s), (3, 3)).fill(0.0);
        }
        assert_eq!(masked1, masked100);
    }

    #[test]
    fn predict_with_zero_noise_and_zero_cov_changes_nothing() {
        let mut noise = NoiseConfig::default();
        noise.sigma_a = 0.0;
        noise.sigma_w = 0.0;
        noise.sigma_ba = 0.0;
        noise.sigma_bw = 0.0;
        noise.q_vf = [[0.0; 3]; 3];
        let config = FilterConfig { noise, ..FilterConfig::default() };
        let mut filter = Eskf::new(RobotState::default(), config);
        filter.cov.fill(0.0);

        let imu = ImuSample { t: 0.0, gyro: Vector3::zeros(), accel: Vector3::new(0.0, 0.0, 9.81) };
        filter.predict(&imu, 0.002, 1.0).unwrap();
        assert_eq!(filter.cov.amax(), 0.0);
        assert_eq!(filter.state.pos, Vector3::zeros());
    }

    #[test]
    fn predict_adds_noise_on_top_of_transported_covariance() {
        let mut rng = StdRng::seed_from_u64(11);
        let state = random_state(&mut rng);
        let imu = random_imu(&mut rng, 0.0);
        let mut filter = Eskf::new(state, FilterConfig::default());
        let dt = 0.002;

        let (a, b) = error_dynamics_matrices(&filter.state, &imu);
        let q = process_noise(&filter.config.noise, 1.0);
        let (gamma, _) = discretize(&a, &b, &q, dt, 2).unwrap();
        let transported = (&gamma * &filter.cov * gamma.transpose()).trace();

        filter.predict(&imu, dt, 1.0).unwrap();
        assert!(filter.predict_trace_check(transported));
    }

    #[test]
    fn predict_rejects_gap_sized_steps() {
        let mut filter = Eskf::new(RobotState::default(), FilterConfig::default());
        let imu = ImuSample { t: 0.0, gyro: Vector3::zeros(), accel: Vector3::new(0.0, 0.0, 9.81) };
        let err = filter.predict(&imu, 0.5, 1.0).unwrap_err();
        assert!(matches!(err, Error::InvalidDt { .. }));
    }

    fn consistent_setup() -> (RobotState, LegSample, [LegParams; 4]) {
        // A body at a nontrivial pose with all four feet planted exactly where
        // forward kinematics says they are, and every velocity zero.
        let legs = default_legs();
        let mut state = RobotState::default();
        state.pos = Vector3::new(0.3, -0.2, 0.42);
        state.rot = Rotation::exp(&Vector3::new(0.02, -0.04, 0.3));

        let joints = JointState::from_angles(Vector3::new(0.05, 0.5, -1.1));
        let mut sample = LegSample { t: 1.0, legs: [LegObservation::default(); 4] };
        for foot in 0..LEG_COUNT {
            sample.legs[foot] = LegObservation { joints, contact: true };
            let zeta = forward_kinematics(&joints, &legs[foot]);
            state.foot_pos[foot] = state.pos + state.rot * &zeta;
            state.foot_vel[foot] = Vector3::zeros();
        }
        (state, sample, legs)
    }

    #[test]
    fn point_contact_residual_vanishes_on_consistent_static_state() {
        let (state, sample, legs) = consistent_setup();
        let noise = NoiseConfig::default();
        let m = measurement_point_contact(
            &state,
            &sample.legs[0],
            &legs[0],
            0,
            &Vector3::zeros(),
            &noise,
        )
        .unwrap();
        assert!(m.residual.amax() < 1e-12, "residual {:?}", m.residual);
    }

    #[test]
    fn rolling_residual_vanishes_when_foot_velocity_matches_rolling() {
        let (mut state, sample, legs) = consistent_setup();
        let gyro = Vector3::new(0.1, -0.2, 0.3);
        let normal = Vector3::new(0.0, 0.0, 1.0);
        // Give the body a velocity consistent with the velocity rows and set
        // each foot velocity to exactly what the rolling constraint demands.
        for foot in 0..LEG_COUNT {
            let omega_f = foot_angular_velocity(&sample.legs[foot].joints, &gyro, &state.rot, &legs[foot]);
            let radius = contact_radius(&normal, legs[foot].r_foot);
            state.foot_vel[foot] = omega_f.cross(&radius);
        }
        // Velocity rows compare R̂ᵀ(v̂−v̂_f) with −Jφ̇−ω̂×ζ; with φ̇=0 the
        // measured value is −ω̂×ζ, so choose v̂ = v̂_f + R̂(−ω̂×ζ).
        let zeta = forward_kinematics(&sample.legs[0].joints, &legs[0]);
        state.vel = state.foot_vel[0] + state.rot * &(-gyro.cross(&zeta));

        let noise = NoiseConfig::default();
        let rot = state.rot;
        let m = measurement_rolling(&state, &sample.legs[0], &legs[0], 0, &gyro, &rot, &normal, &noise)
            .unwrap();
        assert!(m.residual.amax() < 1e-12, "residual {:?}", m.residual);
    }

    #[test]
    fn rolling_third_block_pulls_foot_velocity_to_zero_when_omega_zero() {
        let (mut state, sample, legs) = consistent_setup();
        state.foot_vel[1] = Vector3::new(0.03, -0.02, 0.01);
        let noise = NoiseConfig::default();
        let rot = state.rot;
        let m = measurement_rolling(
            &state,
            &sample.legs[1],
            &legs[1],
            1,
            &Vector3::zeros(),
            &rot,
            &Vector3::new(0.0, 0.0, 1.0),
            &noise,
        )
        .unwrap();
        let third: Vector3<f64> = m.residual.fixed_rows::<3>(6).into();
        assert_relative_eq!(third, -state.foot_vel[1], epsilon = 1e-14);
    }

    #[test]
    fn point_contact_position_residual_sign_tracks_body_position() {
        let (mut state, sample, legs) = consistent_setup();
        state.rot = Rotation::identity();
        let zeta = forward_kinematics(&sample.legs[2].joints, &legs[2]);
        state.foot_pos[2] = state.pos + zeta;
        let noise = NoiseConfig::default();
        let before = measurement_point_contact(
            &state,
            &sample.legs[2],
            &legs[2],
            2,
            &Vector3::zeros(),
            &noise,
        )
        .unwrap();
        let eps = 1e-3;
        state.pos.x += eps;
        let after = measurement_point_contact(
            &state,
            &sample.legs[2],
            &legs[2],
            2,
            &Vector3::zeros(),
            &noise,
        )
        .unwrap();
        assert_relative_eq!(after.residual[0] - before.residual[0], eps, epsilon = 1e-12);
    }

    #[test]
    fn swing_feet_emit_no_rows() {
        let (state, mut sample, legs) = consistent_setup();
        sample.legs[3].contact = false;
        let noise = NoiseConfig::default();
        assert!(measurement_point_contact(
            &state,
            &sample.legs[3],
            &legs[3],
            3,
            &Vector3::zeros(),
            &noise
        )
        .is_none());
        let stacked = stack_foot_measurements(
            &state,
            &sample,
            ContactModel::Rolling,
            &legs,
            &Vector3::zeros(),
            &Vector3::new(0.0, 0.0, 1.0),
            &NoiseConfig::default(),
        )
        .unwrap();
        assert_eq!(stacked.rows(), 27);

        for leg in sample.legs.iter_mut() {
            leg.contact = false;
        }
        assert!(stack_foot_measurements(
            &state,
            &sample,
            ContactModel::Rolling,
            &legs,
            &Vector3::zeros(),
            &Vector3::new(0.0, 0.0, 1.0),
            &NoiseConfig::default(),
        )
        .is_none());
    }

    /// Finite-difference check of both measurement Jacobians at random states:
    /// the builders recompute the residual under a boxplus-perturbed state
    /// (measured inputs held fixed), so H ≈ −∂residual/∂δ.
    #[test]
    fn measurement_jacobians_match_finite_differences() {
        let legs = default_legs();
        let noise = NoiseConfig::default();
        let normal = Vector3::new(0.0, 0.0, 1.0);
        let mut rng = StdRng::seed_from_u64(42);

        for trial in 0..100 {
            let state = random_state(&mut rng);
            let joints = JointState::new(
                Vector3::new(
                    rng.random_range(-0.6..0.6),
                    rng.random_range(-0.8..0.8),
                    rng.random_range(-2.2..-0.4),
                ),
                Vector3::new(
                    rng.random_range(-3.0..3.0),
                    rng.random_range(-3.0..3.0),
                    rng.random_range(-3.0..3.0),
                ),
            );
            let foot = trial % LEG_COUNT;
            let obs = LegObservation { joints, contact: true };
            let gyro = Vector3::new(
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
            );

            // ω_f's linearization rotation and the debiased gyro are inputs,
            // not functions of the error state, so they stay fixed while the
            // state is perturbed — matching the Jacobian's structure.
            let lin_rot = state.rot;
            let build = |state: &RobotState, rolling: bool| -> Measurement {
                if rolling {
                    measurement_rolling(
                        state, &obs, &legs[foot], foot, &gyro, &lin_rot, &normal, &noise,
                    )
                    .unwrap()
                } else {
                    measurement_point_contact(state, &obs, &legs[foot], foot, &gyro, &noise)
                        .unwrap()
                }
            };

            for rolling in [false, true] {
                let m = build(&state, rolling);
                let eps = 1e-6;
                let mut h_fd = DMatrix::<f64>::zeros(m.rows(), layout::DIM);
                for i in 0..layout::DIM {
                    let mut dp = DVector::zeros(layout::DIM);
                    dp[i] = eps;
                    let mut dm = DVector::zeros(layout::DIM);
                    dm[i] = -eps;
                    let mut xp = state.clone();
                    xp.inject(&dp);
                    let mut xm = state.clone();
                    xm.inject(&dm);
                    let rp = build(&xp, rolling).residual;
                    let rm = build(&xm, rolling).residual;
                    let col = -(rp - rm) / (2.0 * eps);
                    h_fd.column_mut(i).copy_from(&col);
                }
                for r in 0..m.rows() {
                    for c in 0..layout::DIM {
                        let tol = 1e-5 * m.jacobian[(r, c)].abs().max(1.0);
                        assert!(
                            (m.jacobian[(r, c)] - h_fd[(r, c)]).abs() < tol,
                            "H[{r},{c}] mismatch (rolling={rolling}): \
                             analytic {} vs fd {}",
                            m.jacobian[(r, c)],
                            h_fd[(r, c)]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn update_scalar_embedding_matches_kalman_algebra() {
        let mut filter = Eskf::new(RobotState::default(), FilterConfig::default());
        filter.cov = DMatrix::identity(layout::DIM, layout::DIM);

        let mut h = DMatrix::zeros(1, layout::DIM);
        h[(0, layout::P)] = 1.0;
        let meas = Measurement {
            residual: DVector::from_element(1, 1.0),
            jacobian: h,
            noise_diag: DVector::from_element(1, 1.0),
        };
        let out = filter.update(&meas);
        assert!(out.applied);
        assert_relative_eq!(filter.state.pos.x, 0.5, epsilon = 1e-14);
        assert_relative_eq!(filter.cov[(0, 0)], 0.5, epsilon = 1e-14);
        assert_relative_eq!(out.innovation_cov[(0, 0)], 2.0, epsilon = 1e-14);
    }

    #[test]
    fn update_with_zero_residual_leaves_state_and_shrinks_cov() {
        let (state, sample, legs) = consistent_setup();
        let mut filter = Eskf::new(state.clone(), FilterConfig::default());
        let meas = stack_foot_measurements(
            &state,
            &sample,
            ContactModel::Rolling,
            &legs,
            &Vector3::zeros(),
            &Vector3::new(0.0, 0.0, 1.0),
            &filter.config.noise.clone(),
        )
        .unwrap();
        let zeroed = Measurement {
            residual: DVector::zeros(meas.rows()),
            jacobian: meas.jacobian.clone(),
            noise_diag: meas.noise_diag.clone(),
        };
        let before = filter.cov.clone();
        let out = filter.update(&zeroed);
        assert!(out.applied);
        assert_eq!(filter.state.pos, state.pos);
        assert_eq!(filter.state.rot.matrix(), state.rot.matrix());
        let diff = &before - &filter.cov;
        let eig = nalgebra::SymmetricEigen::new(diff.clone()).eigenvalues;
        assert!(eig.min() > -1e-12, "covariance must not grow: {}", eig.min());
        assert!(diff.trace() > 1e-6, "covariance should strictly shrink");
    }

    #[test]
    fn update_joseph_form_matches_simple_form_when_well_conditioned() {
        let (state, sample, legs) = consistent_setup();
        let mut filter = Eskf::new(state.clone(), FilterConfig::default());
        let meas = stack_foot_measurements(
            &state,
            &sample,
            ContactModel::PointContact,
            &legs,
            &Vector3::zeros(),
            &Vector3::new(0.0, 0.0, 1.0),
            &filter.config.noise.clone(),
        )
        .unwrap();

        let p = filter.cov.clone();
        let h = meas.jacobian.clone();
        let r = DMatrix::from_diagonal(&meas.noise_diag);
        let s = &h * &p * h.transpose() + &r;
        let k = &p * h.transpose() * s.try_inverse().unwrap();
        let simple = (DMatrix::<f64>::identity(layout::DIM, layout::DIM) - &k * &h) * &p;

        filter.update(&meas);
        let rel = (&filter.cov - &simple).amax() / simple.amax();
        assert!(rel < 1e-8, "Joseph vs simple form relative gap {rel:.3e}");
    }

    #[test]
    fn update_skips_when_innovation_covariance_degenerates() {
        let mut filter = Eskf::new(RobotState::default(), FilterConfig::default());
        // Two identical rows with zero measurement noise make S singular.
        let mut h = DMatrix::zeros(2, layout::DIM);
        h[(0, layout::P)] = 1.0;
        h[(1, layout::P)] = 1.0;
        let meas = Measurement {
            residual: DVector::from_element(2, 0.1),
            jacobian: h,
            noise_diag: DVector::zeros(2),
        };
        let before = filter.state.clone();
        let out = filter.update(&meas);
        assert!(!out.applied);
        assert_eq!(filter.state.pos, before.pos);
    }

    #[test]
    fn update_without_bias_rows_leaves_bias_untouched() {
        let mut filter = Eskf::new(RobotState::default(), FilterConfig::default());
        // Diagonal P ⇒ no cross-correlation into the bias blocks.
        let mut h = DMatrix::zeros(3, layout::DIM);
        for i in 0..3 {
            h[(i, layout::P + i)] = 1.0;
        }
        let meas = Measurement {
            residual: DVector::from_element(3, 0.2),
            jacobian: h,
            noise_diag: DVector::from_element(3, 1e-4),
        };
        filter.update(&meas);
        assert_eq!(filter.state.accel_bias, Vector3::zeros());
        assert_eq!(filter.state.gyro_bias, Vector3::zeros());
    }

    #[test]
    fn touchdown_reprimes_foot_from_kinematics() {
        let legs = default_legs();
        let mut state = RobotState::default();
        state.pos = Vector3::new(1.0, 0.0, 0.0);
        state.foot_vel[0] = Vector3::new(0.1, 0.0, 0.0);
        let mut filter = Eskf::new(state, FilterConfig::default());

        let target = Vector3::new(0.24, 0.133, -0.50);
        let joints = inverse_kinematics(&target, &legs[0]).unwrap();
        let mut sample = LegSample { t: 0.0, legs: [LegObservation::default(); 4] };
        sample.legs[0] = LegObservation { joints, contact: true };

        let prev = [false; 4];
        filter.on_contact_transition(&prev, &sample, &legs);

        let expected = Vector3::new(1.24, 0.133, -0.50);
        assert!((filter.state.foot_pos[0] - expected).norm() < 1e-9);
        assert_eq!(filter.state.foot_vel[0], Vector3::zeros());
        let fp = layout::foot(0);
        let fv = layout::foot_vel(0);
        for i in 0..3 {
            assert_eq!(filter.cov[(fp + i, fp + i)], 1e2);
            assert_eq!(filter.cov[(fv + i, fv + i)], 1e0);
        }
        assert_eq!(filter.cov[(fp, layout::P)], 0.0);
    }

    #[test]
    fn no_flag_change_is_bit_identical() {
        let (state, sample, legs) = consistent_setup();
        let mut filter = Eskf::new(state, FilterConfig::default());
        filter.cov[(0, 5)] = 0.3;
        filter.cov[(5, 0)] = 0.3;
        let state_before = filter.state.clone();
        let cov_before = filter.cov.clone();
        let prev = sample.contact_flags();
        filter.on_contact_transition(&prev, &sample, &legs);
        assert_eq!(filter.state, state_before);
        assert_eq!(filter.cov, cov_before);
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let mut noise = NoiseConfig::default();
        noise.q_vf[0][1] = 1.0; // asymmetric
        assert!(noise.validate().is_err());

        let mut noise = NoiseConfig::default();
        noise.q_vf = [[-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(noise.validate().is_err());

        let mut cfg = FilterConfig::default();
        cfg.max_dt = -1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = FilterConfig::default();
        cfg.contact_normal = [0.0, 0.0, 2.0];
        assert!(cfg.validate().is_err());
        assert!(FilterConfig::default().validate().is_ok());
    }

    #[test]
    fn noise_config_serde_round_trip() {
        let noise = NoiseConfig::default();
        let text = serde_json::to_string(&noise).unwrap();
        let back: NoiseConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(noise, back);
        // Sparse configs fill in defaults; unknown keys are rejected.
        let sparse: NoiseConfig = serde_json::from_str(r#"{"sigma_a": 0.5}"#).unwrap();
        assert_eq!(sparse.sigma_a, 0.5);
        assert_eq!(sparse.r_pos, noise.r_pos);
        assert!(serde_json::from_str::<NoiseConfig>(r#"{"sigma_q": 1.0}"#).is_err());
    }

    impl Eskf {
        /// Test helper: trace(P) after predict must dominate the transported
        /// trace (the added Q_d is PSD).
        fn predict_trace_check(&self, transported_trace: f64) -> bool {
            self.cov.trace() >= transported_trace - 1e-12
        }
    }
}
