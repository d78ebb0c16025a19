//! Deterministic synthetic quadruped data: trot-gait ground truth with
//! rolling feet, commanded slip windows, and sensor synthesis.
//!
//! The generator is a pure function of (config, seed). The body follows an
//! analytic path with a trapezoidal speed profile; feet alternate between
//! cycloidal swings and rolling stances. During stance the foot-sphere center
//! translates with `v_f = ω_f × r`, where the foot angular velocity is itself
//! a function of the joint rates — a linear fixed point solved exactly at
//! every integration stage, so the rolling constraint holds to machine
//! precision at every sample. Slip is injected *kinematically*: a commanded
//! extra foot velocity during configured windows (there is no contact solver;
//! see the README for why this stands in for friction-limited physics).

use nalgebra::{Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eskf::NoiseConfig;
use crate::kinematics::{
    default_legs, inverse_kinematics, jacobian, rot_jacobian, LegId,
    LegParams, LEG_COUNT,
};
use crate::so3::{skew, Rotation};
use crate::state::{ImuSample, LegObservation, LegSample};

/// Standard gravity in the world frame.
pub const GRAVITY: Vector3<f64> = Vector3::new(0.0, 0.0, -9.81);

/// Supported schema version for scenario files.
pub const SCHEMA_VERSION: u32 = 1;

fn default_imu_rate() -> f64 {
    500.0
}
fn default_leg_rate() -> f64 {
    250.0
}
fn default_touchdown_impulse() -> f64 {
    0.05
}
fn default_schema_version() -> u32 {
    SCHEMA_VERSION
}

/// Gait timing and geometry. Defaults give a 2 Hz diagonal trot at desk
/// scale: 0.25 s stance + 0.25 s swing, 12.5 cm steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GaitConfig {
    pub stance_duration: f64,
    pub swing_duration: f64,
    /// Distance the body advances per full gait cycle; 0 means standing
    /// still with all feet planted.
    pub step_length: f64,
    pub step_height: f64,
    /// Body height above the ground plane, measured along the plane normal.
    pub body_height: f64,
}

impl Default for GaitConfig {
    fn default() -> Self {
        GaitConfig {
            stance_duration: 0.25,
            swing_duration: 0.25,
            step_length: 0.125,
            step_height: 0.06,
            body_height: 0.42,
        }
    }
}

impl GaitConfig {
    pub fn cycle_duration(&self) -> f64 {
        self.stance_duration + self.swing_duration
    }

    /// Steady-state body speed implied by the gait.
    pub fn steady_speed(&self) -> f64 {
        self.step_length / self.cycle_duration()
    }
}

/// Ground path the body center follows. All paths start at the origin
/// heading +x; the parameter is advanced by the trapezoidal speed profile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum PathConfig {
    Straight,
    /// Counter-clockwise circle of the given radius; the parameter is arc
    /// length.
    Circular { radius: f64 },
    /// Lateral sine sway `y = A·sin(2πx/λ)`; the parameter drives x directly,
    /// so ground speed exceeds the nominal profile slightly on the curves.
    Sinusoidal { amplitude: f64, wavelength: f64 },
    /// Straight walk up an inclined plane (positive angle = uphill). The
    /// body pitches with the terrain and feet roll on the tilted plane.
    Slope { angle: f64 },
}

impl Default for PathConfig {
    fn default() -> Self {
        PathConfig::Straight
    }
}

/// A commanded slip episode: the listed legs, while in stance inside
/// `[t_start, t_end)`, have `velocity` (world frame, m/s) added to their
/// rolling foot velocity and are flagged as slipping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlipWindow {
    pub t_start: f64,
    pub t_end: f64,
    pub velocity: [f64; 3],
    pub legs: Vec<LegId>,
}

/// Full scenario description; serializable so runs are reproducible from a
/// single JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default = "default_schema_version")]
    pub schema_version: u32,
    pub duration: f64,
    #[serde(default = "default_imu_rate")]
    pub imu_rate: f64,
    #[serde(default = "default_leg_rate")]
    pub leg_rate: f64,
    #[serde(default)]
    pub gait: GaitConfig,
    #[serde(default)]
    pub path: PathConfig,
    #[serde(default)]
    pub slip_windows: Vec<SlipWindow>,
    #[serde(default)]
    pub noise: NoiseConfig,
    pub seed: u64,
    /// Accelerometer bias at t=0 (the Brownian walk starts here).
    #[serde(default)]
    pub initial_accel_bias: [f64; 3],
    /// Gyroscope bias at t=0.
    #[serde(default)]
    pub initial_gyro_bias: [f64; 3],
    /// Std-dev of additive joint-angle noise (rad).
    #[serde(default)]
    pub encoder_angle_noise_std: f64,
    /// Std-dev of additive joint-rate noise (rad/s).
    #[serde(default)]
    pub encoder_rate_noise_std: f64,
    /// Downward foot-velocity impulse applied for one leg-sample period after
    /// each touchdown (m/s), emulating impact transients; the affected
    /// samples are slip-flagged. 0 disables.
    #[serde(default = "default_touchdown_impulse")]
    pub touchdown_impulse: f64,
}

impl ScenarioConfig {
    /// Minimal valid config: straight walk with default gait and noise.
    pub fn new(duration: f64, seed: u64) -> ScenarioConfig {
        ScenarioConfig {
            schema_version: SCHEMA_VERSION,
            duration,
            imu_rate: default_imu_rate(),
            leg_rate: default_leg_rate(),
            gait: GaitConfig::default(),
            path: PathConfig::default(),
            slip_windows: Vec::new(),
            noise: NoiseConfig::default(),
            seed,
            initial_accel_bias: [0.0; 3],
            initial_gyro_bias: [0.0; 3],
            encoder_angle_noise_std: 0.0,
            encoder_rate_noise_std: 0.0,
            touchdown_impulse: default_touchdown_impulse(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {} (this build reads version {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if !self.duration.is_finite() || self.duration < 0.0 {
            return Err(Error::Config(format!(
                "duration must be finite and non-negative, got {}",
                self.duration
            )));
        }
        if !(self.imu_rate > 0.0) || !(self.leg_rate > 0.0) {
            return Err(Error::Config("sample rates must be positive".into()));
        }
        let ratio = self.imu_rate / self.leg_rate;
        if (ratio - ratio.round()).abs() > 1e-9 || ratio < 1.0 {
            return Err(Error::Config(format!(
                "imu_rate must be an integer multiple of leg_rate, got {} / {}",
                self.imu_rate, self.leg_rate
            )));
        }
        let g = &self.gait;
        if !(g.stance_duration > 0.0) || !(g.swing_duration > 0.0) {
            return Err(Error::Config("gait phase durations must be positive".into()));
        }
        if !(g.step_length >= 0.0) || !(g.step_height >= 0.0) || !(g.body_height > 0.0) {
            return Err(Error::Config(
                "step_length/step_height must be non-negative and body_height positive".into(),
            ));
        }
        match self.path {
            PathConfig::Straight => {}
            PathConfig::Circular { radius } => {
                if !(radius > 0.0) {
                    return Err(Error::Config("circular path needs a positive radius".into()));
                }
            }
            PathConfig::Sinusoidal { amplitude, wavelength } => {
                if !(wavelength > 0.0) || !amplitude.is_finite() {
                    return Err(Error::Config(
                        "sinusoidal path needs a positive wavelength and finite amplitude".into(),
                    ));
                }
            }
            PathConfig::Slope { angle } => {
                if !(angle.abs() < std::f64::consts::FRAC_PI_2) {
                    return Err(Error::Config(
                        "slope angle must lie strictly inside (-π/2, π/2)".into(),
                    ));
                }
            }
        }
        for (i, w) in self.slip_windows.iter().enumerate() {
            if !(w.t_start >= 0.0 && w.t_end <= self.duration && w.t_start < w.t_end) {
                return Err(Error::Config(format!(
                    "slip window {i} [{}, {}) must lie inside [0, {}]",
                    w.t_start, w.t_end, self.duration
                )));
            }
            if w.velocity.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config(format!("slip window {i} velocity is not finite")));
            }
            if w.legs.is_empty() {
                return Err(Error::Config(format!("slip window {i} affects no legs")));
            }
        }
        if !(self.touchdown_impulse >= 0.0) {
            return Err(Error::Config("touchdown_impulse must be non-negative".into()));
        }
        if !(self.encoder_angle_noise_std >= 0.0) || !(self.encoder_rate_noise_std >= 0.0) {
            return Err(Error::Config("encoder noise std-devs must be non-negative".into()));
        }
        self.noise.validate()
    }

    pub fn from_json_file(path: &std::path::Path) -> Result<ScenarioConfig> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let config: ScenarioConfig = serde_json::from_str(&text)
            .map_err(|e| Error::json(path.display().to_string(), e))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json_file(&self, path: &std::path::Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("scenario serialization");
        std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }
}

/// One ground-truth sample at the IMU rate. Body rates and world acceleration
/// are carried along so sensor synthesis is exact rather than differenced;
/// they are not part of the on-disk truth schema.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthRecord {
    pub t: f64,
    pub pos: Vector3<f64>,
    pub rot: Rotation,
    pub vel: Vector3<f64>,
    pub omega_body: Vector3<f64>,
    pub accel_world: Vector3<f64>,
    pub foot_pos: [Vector3<f64>; LEG_COUNT],
    pub foot_vel: [Vector3<f64>; LEG_COUNT],
    pub contact: [bool; LEG_COUNT],
    pub slip: [bool; LEG_COUNT],
}

/// Body pose/twist plus ground geometry at one instant of the analytic path.
#[derive(Debug, Clone, Copy)]
struct BodyState {
    pos: Vector3<f64>,
    rot: Rotation,
    vel: Vector3<f64>,
    omega_body: Vector3<f64>,
    accel_world: Vector3<f64>,
    normal: Vector3<f64>,
}

/// Trapezoidal speed profile: ramp up over `ramp`, cruise at `v_steady`,
/// ramp down to rest at `duration`. Clamped outside [0, duration].
#[derive(Debug, Clone, Copy)]
struct SpeedProfile {
    v_steady: f64,
    ramp: f64,
    duration: f64,
}

impl SpeedProfile {
    fn new(gait: &GaitConfig, duration: f64) -> SpeedProfile {
        let ramp = (2.0 * gait.cycle_duration()).min(duration / 2.0);
        SpeedProfile { v_steady: gait.steady_speed(), ramp, duration }
    }

    /// (s, ṡ, s̈) at time t.
    fn eval(&self, t: f64) -> (f64, f64, f64) {
        let (v, r, total) = (self.v_steady, self.ramp, self.duration);
        if v == 0.0 || total <= 0.0 {
            return (0.0, 0.0, 0.0);
        }
        let dist = v * (total - r);
        if t <= 0.0 {
            (0.0, 0.0, 0.0)
        } else if t < r {
            let a = v / r;
            (0.5 * a * t * t, a * t, a)
        } else if t <= total - r {
            (v * t - 0.5 * v * r, v, 0.0)
        } else if t < total {
            let a = v / r;
            let u = total - t;
            (dist - 0.5 * a * u * u, a * u, -a)
        } else {
            (dist, 0.0, 0.0)
        }
    }
}

/// Analytic body trajectory for one path type.
struct PathModel {
    path: PathConfig,
    profile: SpeedProfile,
    body_height: f64,
}

impl PathModel {
    fn normal(&self) -> Vector3<f64> {
        match self.path {
            PathConfig::Slope { angle } => Vector3::new(-angle.sin(), 0.0, angle.cos()),
            _ => Vector3::z(),
        }
    }

    fn body_at(&self, t: f64) -> BodyState {
        let (s, sdot, sddot) = self.profile.eval(t);
        let normal = self.normal();
        // Ground curve c(s), its derivatives, heading, and body rate.
        let (c, c1, c2, rot, omega_body) = match self.path {
            PathConfig::Straight => (
                Vector3::new(s, 0.0, 0.0),
                Vector3::x(),
                Vector3::zeros(),
                Rotation::identity(),
                Vector3::zeros(),
            ),
            PathConfig::Circular { radius } => {
                let psi = s / radius;
                (
                    Vector3::new(radius * psi.sin(), radius * (1.0 - psi.cos()), 0.0),
                    Vector3::new(psi.cos(), psi.sin(), 0.0),
                    Vector3::new(-psi.sin(), psi.cos(), 0.0) / radius,
                    Rotation::exp(&Vector3::new(0.0, 0.0, psi)),
                    Vector3::new(0.0, 0.0, sdot / radius),
                )
            }
            PathConfig::Sinusoidal { amplitude, wavelength } => {
                let k = 2.0 * std::f64::consts::PI / wavelength;
                let slope = amplitude * k * (k * s).cos();
                let psi = slope.atan();
                let psi_dot = (-amplitude * k * k * (k * s).sin()) / (1.0 + slope * slope) * sdot;
                (
                    Vector3::new(s, amplitude * (k * s).sin(), 0.0),
                    Vector3::new(1.0, slope, 0.0),
                    Vector3::new(0.0, -amplitude * k * k * (k * s).sin(), 0.0),
                    Rotation::exp(&Vector3::new(0.0, 0.0, psi)),
                    Vector3::new(0.0, 0.0, psi_dot),
                )
            }
            PathConfig::Slope { angle } => {
                let tangent = Vector3::new(angle.cos(), 0.0, angle.sin());
                (
                    s * tangent,
                    tangent,
                    Vector3::zeros(),
                    Rotation::exp(&Vector3::new(0.0, -angle, 0.0)),
                    Vector3::zeros(),
                )
            }
        };
        BodyState {
            pos: c + self.body_height * normal,
            rot,
            vel: c1 * sdot,
            omega_body,
            accel_world: c2 * (sdot * sdot) + c1 * sddot,
            normal,
        }
    }
}

/// The diagonal trot schedule. Pair A = {LF, RH} starts in stance at t=0;
/// pair B = {RF, LH} starts mid-cycle (its first stance begins half a cycle
/// in, preceded by a swing from the standing pose).
#[derive(Debug, Clone, Copy, PartialEq)]
enum GaitPhase {
    /// Stance that began at the contained nominal touchdown time.
    Stance { touchdown: f64 },
    /// Swing ending at the contained nominal touchdown time.
    Swing { touchdown: f64 },
}

fn pair_offset(leg: LegId, cycle: f64) -> f64 {
    match leg {
        LegId::LF | LegId::RH => 0.0,
        LegId::RF | LegId::LH => 0.5 * cycle,
    }
}

fn phase_at(gait: &GaitConfig, leg: LegId, t: f64) -> GaitPhase {
    let cycle = gait.cycle_duration();
    let u = t - pair_offset(leg, cycle);
    if u < 0.0 {
        // Initial swing of pair B toward its first touchdown.
        return GaitPhase::Swing { touchdown: pair_offset(leg, cycle) };
    }
    let k = (u / cycle).floor();
    let local = u - k * cycle;
    let cycle_start = k * cycle + pair_offset(leg, cycle);
    if local < gait.stance_duration {
        GaitPhase::Stance { touchdown: cycle_start }
    } else {
        GaitPhase::Swing { touchdown: cycle_start + cycle }
    }
}

/// World-frame foothold target for the stance beginning at `touchdown`: the
/// hip position at mid-stance, projected onto the ground plane, raised by the
/// foot radius along the normal (the record tracks the sphere center).
fn touchdown_target(
    model: &PathModel,
    gait: &GaitConfig,
    leg: &LegParams,
    touchdown: f64,
) -> Vector3<f64> {
    let body = model.body_at(touchdown + 0.5 * gait.stance_duration);
    let hip = body.pos + body.rot * &leg.hip_offset;
    let n = body.normal;
    hip - (hip.dot(&n)) * n + leg.r_foot * n
}

/// Commanded extra foot velocity (slip windows plus the touchdown impulse)
/// for a stance foot at time t. Returns the velocity and whether any command
/// is active (the sample's slip flag).
fn commanded_slip(
    config: &ScenarioConfig,
    normal: &Vector3<f64>,
    leg: LegId,
    touchdown: f64,
    t: f64,
) -> (Vector3<f64>, bool) {
    let mut v = Vector3::zeros();
    let mut active = false;
    for w in &config.slip_windows {
        if t >= w.t_start && t < w.t_end && w.legs.contains(&leg) {
            v += Vector3::from(w.velocity);
            active = true;
        }
    }
    if config.touchdown_impulse > 0.0 && t - touchdown < 1.0 / config.leg_rate {
        v -= config.touchdown_impulse * normal;
        active = true;
    }
    (v, active)
}

/// Rolling foot velocity: solves the linear fixed point coupling the foot
/// velocity to the joint rates it induces. With ζ = Ĝᵀ(f−p), the joint rates
/// are φ̇ = J⁻¹(Gᵀ(v_f − v) − ω×ζ), the foot frame spins at
/// ω_f = G(ω + J_rot·φ̇), and rolling demands v_f = ω_f×r + v_extra; both
/// sides are linear in v_f, so (I + [r]ₓM)v_f = −[r]ₓc + v_extra solves it.
fn rolling_foot_velocity(
    body: &BodyState,
    leg: &LegParams,
    foot: &Vector3<f64>,
    v_extra: &Vector3<f64>,
    t: f64,
    leg_name: &'static str,
) -> Result<Vector3<f64>> {
    let zeta = body.rot.inv_apply(&(foot - body.pos));
    let joints = inverse_kinematics(&zeta, leg)
        .map_err(|e| Error::Infeasible { t, leg: leg_name, source: Box::new(e) })?;
    let jac = jacobian(&joints, leg);
    let jac_inv = jac.try_inverse().ok_or(Error::Infeasible {
        t,
        leg: leg_name,
        source: Box::new(Error::NonFinite("singular leg jacobian")),
    })?;
    let rot_m = body.rot.matrix();
    let m = rot_m * rot_jacobian(&joints, leg) * jac_inv * rot_m.transpose();
    let c = body.rot * &body.omega_body
        - m * body.vel
        - rot_m * rot_jacobian(&joints, leg) * jac_inv * (body.omega_body.cross(&zeta));
    let r = -leg.r_foot * body.normal;
    let lhs = Matrix3::identity() + skew(&r) * m;
    let rhs = -skew(&r) * c + v_extra;
    lhs.lu().solve(&rhs).ok_or(Error::Infeasible {
        t,
        leg: leg_name,
        source: Box::new(Error::NonFinite("rolling fixed point")),
    })
}

/// Cycloidal swing interpolation between two footholds with a vertical bump
/// along the plane normal. Returns (position, velocity) at phase τ∈[0,1].
fn swing_foot(
    from: &Vector3<f64>,
    to: &Vector3<f64>,
    normal: &Vector3<f64>,
    step_height: f64,
    tau: f64,
    swing_duration: f64,
) -> (Vector3<f64>, Vector3<f64>) {
    let two_pi = 2.0 * std::f64::consts::PI;
    let sigma = tau - (two_pi * tau).sin() / two_pi;
    let sigma_dot = 1.0 - (two_pi * tau).cos();
    let bump = 0.5 * step_height * (1.0 - (two_pi * tau).cos());
    let bump_dot = 0.5 * step_height * two_pi * (two_pi * tau).sin();
    let pos = from + sigma * (to - from) + bump * normal;
    let vel = (sigma_dot * (to - from) + bump_dot * normal) / swing_duration;
    (pos, vel)
}

const LEG_NAMES: [&str; LEG_COUNT] = ["LF", "RF", "LH", "RH"];

/// Generates the ground-truth sequence at the IMU rate, inclusive of both
/// endpoints (a zero-length scenario produces nothing).
pub fn generate_truth(config: &ScenarioConfig) -> Result<Vec<GroundTruthRecord>> {
    config.validate()?;
    let legs = default_legs();
    let model = PathModel {
        path: config.path,
        profile: SpeedProfile::new(&config.gait, config.duration),
        body_height: config.gait.body_height,
    };
    let dt = 1.0 / config.imu_rate;
    let steps = (config.duration * config.imu_rate).round() as usize;
    if steps == 0 {
        return Ok(Vec::new());
    }
    let static_gait = config.gait.step_length == 0.0;

    // Standing footholds: hips at t=0 projected onto the plane.
    let stand: [Vector3<f64>; LEG_COUNT] = std::array::from_fn(|l| {
        let body = model.body_at(0.0);
        let hip = body.pos + body.rot * &legs[l].hip_offset;
        let n = body.normal;
        hip - hip.dot(&n) * n + legs[l].r_foot * n
    });

    let mut foot_pos = stand;
    let mut phases: [GaitPhase; LEG_COUNT] = std::array::from_fn(|l| {
        phase_at(&config.gait, LegId::ALL[l], 0.0)
    });
    // Feet already in stance at t=0 start at their scheduled target.
    if !static_gait {
        for l in 0..LEG_COUNT {
            if let GaitPhase::Stance { touchdown } = phases[l] {
                foot_pos[l] = touchdown_target(&model, &config.gait, &legs[l], touchdown);
            }
        }
    }
    // Swing start positions (pair B leaves from the standing pose).
    let mut swing_from = stand;

    let mut records = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        let t = k as f64 * dt;
        let body = model.body_at(t);
        let mut rec = GroundTruthRecord {
            t,
            pos: body.pos,
            rot: body.rot,
            vel: body.vel,
            omega_body: body.omega_body,
            accel_world: body.accel_world,
            foot_pos,
            foot_vel: [Vector3::zeros(); LEG_COUNT],
            contact: [static_gait; LEG_COUNT],
            slip: [false; LEG_COUNT],
        };

        if !static_gait {
            for l in 0..LEG_COUNT {
                let leg_id = LegId::ALL[l];
                let phase = phase_at(&config.gait, leg_id, t);
                // Phase transitions (quantized to the sample grid).
                match (phases[l], phase) {
                    (GaitPhase::Swing { touchdown }, GaitPhase::Stance { .. }) => {
                        foot_pos[l] =
                            touchdown_target(&model, &config.gait, &legs[l], touchdown);
                    }
                    (GaitPhase::Stance { .. }, GaitPhase::Swing { .. }) => {
                        swing_from[l] = foot_pos[l];
                    }
                    _ => {}
                }
                phases[l] = phase;

                match phase {
                    GaitPhase::Stance { touchdown } => {
                        let (v_extra, slipping) =
                            commanded_slip(config, &body.normal, leg_id, touchdown, t);
                        let v_f = rolling_foot_velocity(
                            &body,
                            &legs[l],
                            &foot_pos[l],
                            &v_extra,
                            t,
                            LEG_NAMES[l],
                        )?;
                        rec.foot_pos[l] = foot_pos[l];
                        rec.foot_vel[l] = v_f;
                        rec.contact[l] = true;
                        rec.slip[l] = slipping;
                        // Advance the rolling foot to the next sample (RK4 on
                        // ḟ = v_f(f, t); the body state at stage times is
                        // analytic).
                        if k < steps {
                            let eval = |tau: f64, f: &Vector3<f64>| -> Result<Vector3<f64>> {
                                let b = model.body_at(tau);
                                let (ve, _) =
                                    commanded_slip(config, &b.normal, leg_id, touchdown, tau);
                                rolling_foot_velocity(&b, &legs[l], f, &ve, tau, LEG_NAMES[l])
                            };
                            let k1 = v_f;
                            let k2 = eval(t + 0.5 * dt, &(foot_pos[l] + 0.5 * dt * k1))?;
                            let k3 = eval(t + 0.5 * dt, &(foot_pos[l] + 0.5 * dt * k2))?;
                            let k4 = eval(t + dt, &(foot_pos[l] + dt * k3))?;
                            foot_pos[l] += dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
                        }
                    }
                    GaitPhase::Swing { touchdown } => {
                        let target =
                            touchdown_target(&model, &config.gait, &legs[l], touchdown);
                        let swing_start = touchdown - config.gait.swing_duration;
                        let tau =
                            ((t - swing_start) / config.gait.swing_duration).clamp(0.0, 1.0);
                        let (pos, vel) = swing_foot(
                            &swing_from[l],
                            &target,
                            &body.normal,
                            config.gait.step_height,
                            tau,
                            config.gait.swing_duration,
                        );
                        foot_pos[l] = pos;
                        rec.foot_pos[l] = pos;
                        rec.foot_vel[l] = vel;
                    }
                }
            }
        }
        records.push(rec);
    }
    Ok(records)
}

/// Synthesizes IMU measurements from ground truth: specific force and body
/// rates corrupted by Brownian biases and white noise, all drawn from a
/// dedicated seeded substream so runs are bitwise reproducible.
pub fn synthesize_imu(truth: &[GroundTruthRecord], config: &ScenarioConfig) -> Vec<ImuSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(0);
    let normal = StandardNormal;
    let dt = 1.0 / config.imu_rate;
    let sqrt_dt = dt.sqrt();
    // White-noise std per sample from the continuous density: σ/√dt.
    let sigma_a = config.noise.sigma_a / sqrt_dt;
    let sigma_w = config.noise.sigma_w / sqrt_dt;
    let mut bias_a = Vector3::from(config.initial_accel_bias);
    let mut bias_w = Vector3::from(config.initial_gyro_bias);

    let draw3 = move |rng: &mut ChaCha8Rng| -> Vector3<f64> {
        Vector3::new(normal.sample(rng), normal.sample(rng), normal.sample(rng))
    };

    let mut samples = Vec::with_capacity(truth.len());
    for rec in truth {
        let specific_force = rec.rot.inv_apply(&(rec.accel_world - GRAVITY));
        // Noise is always drawn, even at zero density, so the stream layout
        // is independent of the noise settings.
        let n_w = draw3(&mut rng) * sigma_w;
        let n_a = draw3(&mut rng) * sigma_a;
        samples.push(ImuSample {
            t: rec.t,
            gyro: rec.omega_body + bias_w + n_w,
            accel: specific_force + bias_a + n_a,
        });
        bias_w += draw3(&mut rng) * (config.noise.sigma_bw * sqrt_dt);
        bias_a += draw3(&mut rng) * (config.noise.sigma_ba * sqrt_dt);
    }
    samples
}

/// Synthesizes encoder readings at the leg rate by inverting the leg
/// kinematics against the ground-truth body and foot states. Joint rates are
/// analytic (no differencing): φ̇ = J⁻¹(Gᵀ(v_f − v) − ω×ζ).
pub fn synthesize_encoders(
    truth: &[GroundTruthRecord],
    legs: &[LegParams; LEG_COUNT],
    config: &ScenarioConfig,
) -> Result<Vec<LegSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let normal = StandardNormal;
    let stride = (config.imu_rate / config.leg_rate).round() as usize;

    let mut samples = Vec::new();
    for rec in truth.iter().step_by(stride) {
        let mut legs_out = [LegObservation::default(); LEG_COUNT];
        for l in 0..LEG_COUNT {
            let zeta = rec.rot.inv_apply(&(rec.foot_pos[l] - rec.pos));
            let mut joints = inverse_kinematics(&zeta, &legs[l]).map_err(|e| {
                Error::Infeasible { t: rec.t, leg: LEG_NAMES[l], source: Box::new(e) }
            })?;
            let jac = jacobian(&joints, &legs[l]);
            let rel = rec.rot.inv_apply(&(rec.foot_vel[l] - rec.vel))
                - rec.omega_body.cross(&zeta);
            joints.dq = jac.lu().solve(&rel).ok_or(Error::Infeasible {
                t: rec.t,
                leg: LEG_NAMES[l],
                source: Box::new(Error::NonFinite("singular leg jacobian")),
            })?;
            // Drawn unconditionally to keep the stream layout fixed.
            let n_q = Vector3::new(
                normal.sample(&mut rng),
                normal.sample(&mut rng),
                normal.sample(&mut rng),
            );
            let n_dq = Vector3::new(
                normal.sample(&mut rng),
                normal.sample(&mut rng),
                normal.sample(&mut rng),
            );
            joints.q += n_q * config.encoder_angle_noise_std;
            joints.dq += n_dq * config.encoder_rate_noise_std;
            legs_out[l] = LegObservation { joints, contact: rec.contact[l] };
        }
        samples.push(LegSample { t: rec.t, legs: legs_out });
    }
    Ok(samples)
}
