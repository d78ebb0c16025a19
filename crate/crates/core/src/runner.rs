//! Drives an estimator variant over a recorded log: IMU-rate prediction,
//! leg-rate measurement updates, health tracking, and per-step timing.
//!
//! The six variants mirror the ablation roster: a point-contact filter, the
//! rolling-contact filter, the same filter with permanently inflated
//! foot-velocity noise, and three multiple-model configurations (independent
//! bank with equal-weight averaging, the standard two-mode engine, and the
//! three-mode variant with an intermediate slip level).

use std::time::Instant;

use nalgebra::{DMatrix, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eskf::{stack_foot_measurements, ContactModel, Eskf, FilterConfig};
use crate::imm::{build_bank, ImmParams, ModeBank};
use crate::kinematics::{forward_kinematics, LegParams, LEG_COUNT};
use crate::logio::{DiagRecord, EstRecord, ModeRecord, TruthRow};
use crate::state::{ImuSample, LegSample, RobotState};

/// Steps excluded from timing so allocator and cache warm-up don't pollute
/// the per-step cost.
pub const RUNTIME_WARMUP_STEPS: usize = 1000;

/// PSD slack: the covariance passes the positive-semidefiniteness check when
/// `P + slack·I` admits a Cholesky factorization.
const PSD_SLACK: f64 = 1e-9;

/// The estimator roster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorKind {
    /// Point-contact measurement model, single filter.
    EskfPc,
    /// Rolling-contact measurement model, single filter.
    EskfR,
    /// Rolling model with the foot-velocity noise permanently inflated to the
    /// slip level (the "enlarged process noise" ablation).
    EskfL,
    /// Independent two-mode bank, identity transitions, equal-weight fusion.
    ImmNoInteraction,
    /// Two-mode interacting bank (nominal + slip).
    ImmPo,
    /// Three-mode interacting bank (nominal, mild slip, severe slip).
    ImmT,
}

/// Estimator names accepted on the command line, in display order.
pub const ESTIMATOR_NAMES: [&str; 6] =
    ["eskf-pc", "eskf-r", "eskf-l", "imm-no-interaction", "imm-po", "imm-t"];

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 6] = [
        EstimatorKind::EskfPc,
        EstimatorKind::EskfR,
        EstimatorKind::EskfL,
        EstimatorKind::ImmNoInteraction,
        EstimatorKind::ImmPo,
        EstimatorKind::ImmT,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::EskfPc => "eskf-pc",
            EstimatorKind::EskfR => "eskf-r",
            EstimatorKind::EskfL => "eskf-l",
            EstimatorKind::ImmNoInteraction => "imm-no-interaction",
            EstimatorKind::ImmPo => "imm-po",
            EstimatorKind::ImmT => "imm-t",
        }
    }

    pub fn is_imm(self) -> bool {
        matches!(
            self,
            EstimatorKind::ImmNoInteraction | EstimatorKind::ImmPo | EstimatorKind::ImmT
        )
    }

    pub fn contact_model(self) -> ContactModel {
        match self {
            EstimatorKind::EskfPc => ContactModel::PointContact,
            _ => ContactModel::Rolling,
        }
    }

    /// Bank parameters for the multiple-model variants.
    pub fn imm_params(self) -> Option<ImmParams> {
        match self {
            EstimatorKind::ImmNoInteraction => Some(ImmParams::no_interaction()),
            EstimatorKind::ImmPo => Some(ImmParams::two_mode()),
            EstimatorKind::ImmT => Some(ImmParams::three_mode()),
            _ => None,
        }
    }
}

impl std::fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for EstimatorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<EstimatorKind> {
        match s {
            "eskf-pc" => Ok(EstimatorKind::EskfPc),
            "eskf-r" => Ok(EstimatorKind::EskfR),
            "eskf-l" => Ok(EstimatorKind::EskfL),
            "imm-no-interaction" => Ok(EstimatorKind::ImmNoInteraction),
            "imm-po" => Ok(EstimatorKind::ImmPo),
            "imm-t" => Ok(EstimatorKind::ImmT),
            other => Err(Error::Config(format!(
                "unknown estimator {other:?}; valid estimators: {}",
                ESTIMATOR_NAMES.join(", ")
            ))),
        }
    }
}

/// Per-run estimator setup: the filter configuration plus an optional bank
/// override replacing the variant's default mode parameters.
#[derive(Debug, Clone, Default)]
pub struct RunConfig {
    pub filter: FilterConfig,
    pub imm_override: Option<ImmParams>,
}

impl RunConfig {
    /// Bank parameters for `kind` after applying the override.
    fn imm_params(&self, kind: EstimatorKind) -> Option<ImmParams> {
        match (&self.imm_override, kind.imm_params()) {
            (Some(over), Some(_)) => Some(over.clone()),
            (_, default) => default,
        }
    }

    /// Noise scale for the permanently-inflated single filter: the bank's
    /// strongest slip mode.
    fn inflated_alpha(&self) -> f64 {
        let params = self.imm_override.clone().unwrap_or_else(ImmParams::two_mode);
        *params.alphas.last().expect("bank parameters always hold at least one alpha")
    }
}

/// Wall-clock cost of the run, measured per IMU step after warm-up.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RuntimeStats {
    pub timed_steps: usize,
    pub mean_step_seconds: f64,
}

/// Numerical health over the whole run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunHealth {
    /// max over updates of max|P − Pᵀ|.
    pub max_symmetry_error: f64,
    /// True when `P + slack·I` stayed Cholesky-factorizable at every update.
    pub all_psd: bool,
    /// max over updates of |Σμ − 1| (0 for single-filter runs).
    pub max_mu_deviation: f64,
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct RunOutput {
    /// Body-state estimate at every IMU timestamp.
    pub est: Vec<EstRecord>,
    /// Filter health at every measurement update.
    pub diag: Vec<DiagRecord>,
    /// Mode probabilities at every update (empty for single-filter runs).
    pub modes: Vec<ModeRecord>,
    pub runtime: RuntimeStats,
    pub health: RunHealth,
}

/// Initial filter state: body pose and velocity from the first ground-truth
/// row, feet from forward kinematics of the first encoder sample, zero foot
/// velocities and biases.
pub fn initial_state(
    truth0: &TruthRow,
    first_legs: &LegSample,
    legs: &[LegParams; LEG_COUNT],
) -> Result<RobotState> {
    let rot = truth0.rot()?;
    let mut state = RobotState {
        pos: truth0.pos,
        vel: truth0.vel,
        rot,
        ..RobotState::default()
    };
    for l in 0..LEG_COUNT {
        let foot_body = forward_kinematics(&first_legs.legs[l].joints, &legs[l]);
        state.foot_pos[l] = state.pos + rot * &foot_body;
        state.foot_vel[l] = Vector3::zeros();
    }
    Ok(state)
}

enum Engine {
    Single { filter: Eskf, alpha: f64 },
    Bank(ModeBank),
}

impl Engine {
    fn predict(&mut self, imu: &ImuSample, dt: f64) -> Result<()> {
        match self {
            Engine::Single { filter, alpha } => filter.predict(imu, dt, *alpha),
            Engine::Bank(bank) => bank.predict_all(imu, dt),
        }
    }

    /// Posterior body estimate for the trajectory record.
    fn estimate(&self, t: f64) -> EstRecord {
        let state = match self {
            Engine::Single { filter, .. } => filter.state.clone(),
            Engine::Bank(bank) => bank.fused().0,
        };
        EstRecord {
            t,
            pos: state.pos,
            quat: state.rot.to_quaternion(),
            vel: state.vel,
        }
    }
}

fn symmetry_error(p: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..p.nrows() {
        for j in (i + 1)..p.ncols() {
            worst = worst.max((p[(i, j)] - p[(j, i)]).abs());
        }
    }
    worst
}

fn is_psd(p: &DMatrix<f64>) -> bool {
    let n = p.nrows();
    let slack = DMatrix::<f64>::identity(n, n) * PSD_SLACK;
    nalgebra::Cholesky::new(p + slack).is_some()
}

/// Runs one estimator over a log. IMU samples drive prediction; every leg
/// sample triggers contact transitions and a measurement update at the
/// nearest IMU timestamp. Estimates are recorded at every IMU timestamp
/// (posterior where an update occurred). Any non-finite state aborts with the
/// first offending timestamp.
pub fn run_estimator(
    kind: EstimatorKind,
    imu: &[ImuSample],
    leg_samples: &[LegSample],
    initial: RobotState,
    legs: &[LegParams; LEG_COUNT],
    run: &RunConfig,
) -> Result<RunOutput> {
    if imu.is_empty() {
        return Err(Error::EmptyTrajectory("imu log"));
    }
    let model = kind.contact_model();
    let mut engine = match kind {
        EstimatorKind::EskfPc | EstimatorKind::EskfR => Engine::Single {
            filter: Eskf::new(initial, run.filter.clone()),
            alpha: 1.0,
        },
        EstimatorKind::EskfL => Engine::Single {
            filter: Eskf::new(initial, run.filter.clone()),
            alpha: run.inflated_alpha(),
        },
        EstimatorKind::ImmNoInteraction | EstimatorKind::ImmPo | EstimatorKind::ImmT => {
            let params = run
                .imm_params(kind)
                .expect("multiple-model variants always carry bank parameters");
            Engine::Bank(build_bank(initial, run.filter.clone(), params)?)
        }
    };

    let mut est = Vec::with_capacity(imu.len());
    let mut diag = Vec::new();
    let mut modes = Vec::new();
    let mut health = RunHealth {
        max_symmetry_error: 0.0,
        all_psd: true,
        max_mu_deviation: 0.0,
    };
    // The first leg sample describes the contact state the filter was
    // initialized with, so the first transition check is a no-op.
    let mut prev_flags = leg_samples.first().map(|s| s.contact_flags()).unwrap_or([false; 4]);
    let mut leg_idx = 0usize;
    let mut timed_steps = 0usize;
    let mut timed_total = 0.0f64;

    for i in 0..imu.len() {
        let started = Instant::now();
        let t = imu[i].t;
        if !imu[i].is_finite() {
            return Err(Error::NonFiniteState { t, what: "imu sample" });
        }

        // Measurement stage: every leg sample due at or before this IMU time.
        while leg_idx < leg_samples.len() && leg_samples[leg_idx].t <= t + 1e-9 {
            let sample = &leg_samples[leg_idx];
            let (trace, cov_sym, cov_psd, applied) = match &mut engine {
                Engine::Single { filter, .. } => {
                    filter.on_contact_transition(&prev_flags, sample, legs);
                    let meas = stack_foot_measurements(
                        &filter.state,
                        sample,
                        model,
                        legs,
                        &imu[i].gyro,
                        &filter.config.contact_normal_vector(),
                        &filter.config.noise,
                    );
                    let applied = match meas {
                        Some(meas) => filter.update(&meas).applied,
                        None => false,
                    };
                    if !filter.state.is_finite() {
                        return Err(Error::NonFiniteState { t, what: "filter state" });
                    }
                    (
                        filter.trace_cov(),
                        symmetry_error(&filter.cov),
                        is_psd(&filter.cov),
                        applied,
                    )
                }
                Engine::Bank(bank) => {
                    let diags = bank.update_cycle(sample, &prev_flags, legs, model, &imu[i].gyro);
                    let applied = diags.iter().any(|d| d.update_applied);
                    let (fused_state, fused_cov) = bank.fused();
                    if !fused_state.is_finite() {
                        return Err(Error::NonFiniteState { t, what: "fused state" });
                    }
                    let mu_dev = (bank.mu.iter().sum::<f64>() - 1.0).abs();
                    health.max_mu_deviation = health.max_mu_deviation.max(mu_dev);
                    modes.push(ModeRecord { t, mu: bank.mu.clone() });
                    // Mixing for the next cycle happens after the posterior
                    // is captured.
                    bank.begin_cycle();
                    (
                        fused_cov.trace(),
                        symmetry_error(&fused_cov),
                        is_psd(&fused_cov),
                        applied,
                    )
                }
            };
            health.max_symmetry_error = health.max_symmetry_error.max(cov_sym);
            health.all_psd &= cov_psd;
            diag.push(DiagRecord {
                t,
                trace_cov: trace,
                symmetry_error: cov_sym,
                psd: cov_psd,
                update_applied: applied,
            });
            prev_flags = sample.contact_flags();
            leg_idx += 1;
        }

        let record = engine.estimate(t);
        if !record.pos.iter().chain(record.vel.iter()).all(|x| x.is_finite()) {
            return Err(Error::NonFiniteState { t, what: "trajectory record" });
        }
        est.push(record);

        if i + 1 < imu.len() {
            let dt = imu[i + 1].t - t;
            engine.predict(&imu[i], dt)?;
        }

        if i >= RUNTIME_WARMUP_STEPS {
            timed_total += started.elapsed().as_secs_f64();
            timed_steps += 1;
        }
    }

    Ok(RunOutput {
        est,
        diag,
        modes,
        runtime: RuntimeStats {
            timed_steps,
            mean_step_seconds: if timed_steps > 0 { timed_total / timed_steps as f64 } else { 0.0 },
        },
        health,
    })
}
