//! End-to-end pipeline checks: simulate → serialize → deserialize → estimate
//! must behave exactly like the in-memory path, and the filters must stay
//! healthy across contact transitions on a noisy trot.

use trotter::eskf::NoiseConfig;
use trotter::kinematics::default_legs;
use trotter::logio::{read_log, write_log, TruthRow};
use trotter::runner::{initial_state, run_estimator, EstimatorKind, RunConfig};
use trotter::sim::{generate_truth, synthesize_encoders, synthesize_imu, ScenarioConfig};

fn run_from_parts(
    kind: EstimatorKind,
    truth0: &TruthRow,
    imu: &[trotter::state::ImuSample],
    encoders: &[trotter::state::LegSample],
    noise: &NoiseConfig,
) -> trotter::runner::RunOutput {
    let legs = default_legs();
    let initial = initial_state(truth0, &encoders[0], &legs).unwrap();
    let mut run = RunConfig::default();
    run.filter.noise = noise.clone();
    run_estimator(kind, imu, encoders, initial, &legs, &run).unwrap()
}

/// The 16-digit scientific float format is wide enough that a log written to
/// disk and read back drives the filter to bit-identical estimates.
#[test]
fn estimates_survive_a_csv_round_trip_bit_for_bit() {
    let config = ScenarioConfig::new(2.0, 19);
    let legs = default_legs();
    let truth = generate_truth(&config).unwrap();
    let imu = synthesize_imu(&truth, &config);
    let encoders = synthesize_encoders(&truth, &legs, &config).unwrap();

    let dir = tempfile::tempdir().unwrap();
    write_log(dir.path(), &truth, &imu, &encoders, &config).unwrap();
    let bundle = read_log(dir.path()).unwrap();

    let truth0 = TruthRow::from_record(&truth[0]);
    let direct = run_from_parts(EstimatorKind::ImmPo, &truth0, &imu, &encoders, &config.noise);
    let reread = run_from_parts(
        EstimatorKind::ImmPo,
        &bundle.truth[0],
        &bundle.imu,
        &bundle.legs,
        &bundle.config.noise,
    );

    assert_eq!(direct.est.len(), reread.est.len());
    for (a, b) in direct.est.iter().zip(&reread.est) {
        assert_eq!(a.t.to_bits(), b.t.to_bits());
        for k in 0..3 {
            assert_eq!(a.pos[k].to_bits(), b.pos[k].to_bits(), "pos at t = {}", a.t);
            assert_eq!(a.vel[k].to_bits(), b.vel[k].to_bits(), "vel at t = {}", a.t);
        }
        for k in 0..4 {
            assert_eq!(a.quat[k].to_bits(), b.quat[k].to_bits(), "quat at t = {}", a.t);
        }
    }
    for (a, b) in direct.modes.iter().zip(&reread.modes) {
        for (x, y) in a.mu.iter().zip(&b.mu) {
            assert_eq!(x.to_bits(), y.to_bits(), "mu at t = {}", a.t);
        }
    }
}

/// A noisy trot with touchdown transients keeps every filter variant finite,
/// symmetric, and positive-semidefinite through repeated contact switches.
#[test]
fn all_variants_stay_healthy_through_noisy_contact_switching() {
    let config = ScenarioConfig::new(3.0, 4);
    let legs = default_legs();
    let truth = generate_truth(&config).unwrap();
    let imu = synthesize_imu(&truth, &config);
    let encoders = synthesize_encoders(&truth, &legs, &config).unwrap();
    let truth0 = TruthRow::from_record(&truth[0]);

    for kind in EstimatorKind::ALL {
        let out = run_from_parts(kind, &truth0, &imu, &encoders, &config.noise);
        assert!(out.health.all_psd, "{kind}: covariance lost PSD");
        assert!(
            out.health.max_symmetry_error < 1e-9,
            "{kind}: symmetry error {}",
            out.health.max_symmetry_error
        );
        assert!(
            out.health.max_mu_deviation < 1e-12,
            "{kind}: mode probabilities drifted from 1 by {}",
            out.health.max_mu_deviation
        );
        let final_err = (out.est.last().unwrap().pos - truth.last().unwrap().pos).norm();
        assert!(final_err < 0.5, "{kind}: final position error {final_err}");
        assert!(out.diag.iter().filter(|d| d.update_applied).count() > 100, "{kind}");
    }
}
