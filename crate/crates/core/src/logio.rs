//! CSV/JSON log formats for simulator output and estimator results.
//!
//! Every float is written as `{:.16e}` (17 significant digits), which
//! round-trips any f64 bit-exactly through the decimal representation, so
//! write→read→write is idempotent at the byte level. Booleans are 0/1.
//! Headers carry units in brackets and are validated on read.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{JointState, LEG_COUNT};
use crate::sim::{GroundTruthRecord, ScenarioConfig, SlipWindow};
use crate::so3::Rotation;
use crate::state::{ImuSample, LegObservation, LegSample};

/// Leg column order in every per-leg file.
pub const LEG_ORDER: [&str; LEG_COUNT] = ["LF", "RF", "LH", "RH"];

/// Lossless decimal rendering of an f64.
fn fmt(x: f64) -> String {
    format!("{x:.16e}")
}

fn fmt_bool(b: bool) -> &'static str {
    if b {
        "1"
    } else {
        "0"
    }
}

fn parse_f64(cell: &str, path: &Path, what: &str) -> Result<f64> {
    cell.trim().parse::<f64>().map_err(|_| {
        Error::Config(format!("{}: cannot parse {what} from {cell:?}", path.display()))
    })
}

fn parse_bool(cell: &str, path: &Path, what: &str) -> Result<bool> {
    match cell.trim() {
        "0" => Ok(false),
        "1" => Ok(true),
        other => Err(Error::Config(format!(
            "{}: flag {what} must be 0 or 1, got {other:?}",
            path.display()
        ))),
    }
}

fn open_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(csv::Writer::from_writer(BufWriter::new(file)))
}

fn open_reader(path: &Path) -> Result<csv::Reader<BufReader<File>>> {
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(csv::Reader::from_reader(BufReader::new(file)))
}

fn check_header(path: &Path, reader: &mut csv::Reader<BufReader<File>>, expected: &[String]) -> Result<()> {
    let got = reader
        .headers()
        .map_err(|e| Error::csv(path.display().to_string(), e))?;
    let got: Vec<&str> = got.iter().collect();
    if got != expected.iter().map(|s| s.as_str()).collect::<Vec<_>>() {
        return Err(Error::Config(format!(
            "{}: unexpected header {:?}",
            path.display(),
            got
        )));
    }
    Ok(())
}

fn write_err(path: &Path, e: csv::Error) -> Error {
    Error::csv(path.display().to_string(), e)
}

// ---------------------------------------------------------------------------
// imu.csv
// ---------------------------------------------------------------------------

fn imu_header() -> Vec<String> {
    vec![
        "t [s]".into(),
        "wx [rad/s]".into(),
        "wy [rad/s]".into(),
        "wz [rad/s]".into(),
        "ax [m/s^2]".into(),
        "ay [m/s^2]".into(),
        "az [m/s^2]".into(),
    ]
}

pub fn write_imu_csv(path: &Path, samples: &[ImuSample]) -> Result<()> {
    let mut w = open_writer(path)?;
    w.write_record(&imu_header()).map_err(|e| write_err(path, e))?;
    for s in samples {
        let row = [
            fmt(s.t),
            fmt(s.gyro.x),
            fmt(s.gyro.y),
            fmt(s.gyro.z),
            fmt(s.accel.x),
            fmt(s.accel.y),
            fmt(s.accel.z),
        ];
        w.write_record(&row).map_err(|e| write_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_imu_csv(path: &Path) -> Result<Vec<ImuSample>> {
    let mut r = open_reader(path)?;
    check_header(path, &mut r, &imu_header())?;
    let mut out = Vec::new();
    for record in r.records() {
        let record = record.map_err(|e| Error::csv(path.display().to_string(), e))?;
        if record.len() != 7 {
            return Err(Error::Config(format!(
                "{}: imu row needs 7 cells, got {}",
                path.display(),
                record.len()
            )));
        }
        let f = |i: usize, what: &str| parse_f64(&record[i], path, what);
        out.push(ImuSample {
            t: f(0, "t")?,
            gyro: Vector3::new(f(1, "wx")?, f(2, "wy")?, f(3, "wz")?),
            accel: Vector3::new(f(4, "ax")?, f(5, "ay")?, f(6, "az")?),
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// legs.csv
// ---------------------------------------------------------------------------

fn leg_header() -> Vec<String> {
    let mut h = vec!["t [s]".to_string()];
    for leg in LEG_ORDER {
        for j in 1..=3 {
            h.push(format!("{leg}_q{j} [rad]"));
        }
        for j in 1..=3 {
            h.push(format!("{leg}_dq{j} [rad/s]"));
        }
        h.push(format!("{leg}_contact"));
    }
    h
}

pub fn write_leg_csv(path: &Path, samples: &[LegSample]) -> Result<()> {
    let mut w = open_writer(path)?;
    w.write_record(&leg_header()).map_err(|e| write_err(path, e))?;
    for s in samples {
        let mut row = vec![fmt(s.t)];
        for leg in &s.legs {
            for j in 0..3 {
                row.push(fmt(leg.joints.q[j]));
            }
            for j in 0..3 {
                row.push(fmt(leg.joints.dq[j]));
            }
            row.push(fmt_bool(leg.contact).to_string());
        }
        w.write_record(&row).map_err(|e| write_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_leg_csv(path: &Path) -> Result<Vec<LegSample>> {
    let mut r = open_reader(path)?;
    check_header(path, &mut r, &leg_header())?;
    let mut out = Vec::new();
    for record in r.records() {
        let record = record.map_err(|e| Error::csv(path.display().to_string(), e))?;
        if record.len() != 1 + 7 * LEG_COUNT {
            return Err(Error::Config(format!(
                "{}: leg row needs {} cells, got {}",
                path.display(),
                1 + 7 * LEG_COUNT,
                record.len()
            )));
        }
        let t = parse_f64(&record[0], path, "t")?;
        let mut legs = [LegObservation::default(); LEG_COUNT];
        for l in 0..LEG_COUNT {
            let base = 1 + 7 * l;
            let f = |i: usize, what: &str| parse_f64(&record[base + i], path, what);
            let q = Vector3::new(f(0, "q1")?, f(1, "q2")?, f(2, "q3")?);
            let dq = Vector3::new(f(3, "dq1")?, f(4, "dq2")?, f(5, "dq3")?);
            let contact = parse_bool(&record[base + 6], path, "contact")?;
            legs[l] = LegObservation { joints: JointState::new(q, dq), contact };
        }
        out.push(LegSample { t, legs });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// truth.csv
// ---------------------------------------------------------------------------

/// One row of the on-disk ground-truth schema. The orientation is stored as
/// the written quaternion so reads round-trip bit-exactly; `rot()` rebuilds
/// the rotation.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthRow {
    pub t: f64,
    pub pos: Vector3<f64>,
    pub quat: [f64; 4],
    pub vel: Vector3<f64>,
    pub foot_pos: [Vector3<f64>; LEG_COUNT],
    pub foot_vel: [Vector3<f64>; LEG_COUNT],
    pub slip: [bool; LEG_COUNT],
}

impl TruthRow {
    pub fn from_record(rec: &GroundTruthRecord) -> TruthRow {
        TruthRow {
            t: rec.t,
            pos: rec.pos,
            quat: rec.rot.to_quaternion(),
            vel: rec.vel,
            foot_pos: rec.foot_pos,
            foot_vel: rec.foot_vel,
            slip: rec.slip,
        }
    }

    pub fn rot(&self) -> Result<Rotation> {
        let [w, x, y, z] = self.quat;
        Rotation::from_quaternion(w, x, y, z)
    }
}

fn truth_header() -> Vec<String> {
    let mut h = vec![
        "t [s]".to_string(),
        "px [m]".into(),
        "py [m]".into(),
        "pz [m]".into(),
        "qw".into(),
        "qx".into(),
        "qy".into(),
        "qz".into(),
        "vx [m/s]".into(),
        "vy [m/s]".into(),
        "vz [m/s]".into(),
    ];
    for leg in LEG_ORDER {
        for c in ["fx [m]", "fy [m]", "fz [m]", "vfx [m/s]", "vfy [m/s]", "vfz [m/s]"] {
            h.push(format!("{leg}_{c}"));
        }
        h.push(format!("{leg}_slip"));
    }
    h
}

pub fn write_truth_csv(path: &Path, records: &[GroundTruthRecord]) -> Result<()> {
    let mut w = open_writer(path)?;
    w.write_record(&truth_header()).map_err(|e| write_err(path, e))?;
    for rec in records {
        let q = rec.rot.to_quaternion();
        let mut row = vec![
            fmt(rec.t),
            fmt(rec.pos.x),
            fmt(rec.pos.y),
            fmt(rec.pos.z),
            fmt(q[0]),
            fmt(q[1]),
            fmt(q[2]),
            fmt(q[3]),
            fmt(rec.vel.x),
            fmt(rec.vel.y),
            fmt(rec.vel.z),
        ];
        for l in 0..LEG_COUNT {
            for v in [&rec.foot_pos[l], &rec.foot_vel[l]] {
                row.push(fmt(v.x));
                row.push(fmt(v.y));
                row.push(fmt(v.z));
            }
            row.push(fmt_bool(rec.slip[l]).to_string());
        }
        w.write_record(&row).map_err(|e| write_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_truth_csv(path: &Path) -> Result<Vec<TruthRow>> {
    let mut r = open_reader(path)?;
    check_header(path, &mut r, &truth_header())?;
    let cols = 11 + 7 * LEG_COUNT;
    let mut out = Vec::new();
    for record in r.records() {
        let record = record.map_err(|e| Error::csv(path.display().to_string(), e))?;
        if record.len() != cols {
            return Err(Error::Config(format!(
                "{}: truth row needs {cols} cells, got {}",
                path.display(),
                record.len()
            )));
        }
        let f = |i: usize, what: &str| parse_f64(&record[i], path, what);
        let mut row = TruthRow {
            t: f(0, "t")?,
            pos: Vector3::new(f(1, "px")?, f(2, "py")?, f(3, "pz")?),
            quat: [f(4, "qw")?, f(5, "qx")?, f(6, "qy")?, f(7, "qz")?],
            vel: Vector3::new(f(8, "vx")?, f(9, "vy")?, f(10, "vz")?),
            foot_pos: [Vector3::zeros(); LEG_COUNT],
            foot_vel: [Vector3::zeros(); LEG_COUNT],
            slip: [false; LEG_COUNT],
        };
        for l in 0..LEG_COUNT {
            let base = 11 + 7 * l;
            row.foot_pos[l] =
                Vector3::new(f(base, "fx")?, f(base + 1, "fy")?, f(base + 2, "fz")?);
            row.foot_vel[l] =
                Vector3::new(f(base + 3, "vfx")?, f(base + 4, "vfy")?, f(base + 5, "vfz")?);
            row.slip[l] = parse_bool(&record[base + 6], path, "slip")?;
        }
        out.push(row);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Estimator outputs: trajectory, diagnostics, mode timeline
// ---------------------------------------------------------------------------

/// One estimated body-state row (est.csv).
#[derive(Debug, Clone, PartialEq)]
pub struct EstRecord {
    pub t: f64,
    pub pos: Vector3<f64>,
    pub quat: [f64; 4],
    pub vel: Vector3<f64>,
}

impl EstRecord {
    pub fn rot(&self) -> Result<Rotation> {
        let [w, x, y, z] = self.quat;
        Rotation::from_quaternion(w, x, y, z)
    }
}

fn est_header() -> Vec<String> {
    vec![
        "t [s]".into(),
        "px [m]".into(),
        "py [m]".into(),
        "pz [m]".into(),
        "qw".into(),
        "qx".into(),
        "qy".into(),
        "qz".into(),
        "vx [m/s]".into(),
        "vy [m/s]".into(),
        "vz [m/s]".into(),
    ]
}

pub fn write_est_csv(path: &Path, records: &[EstRecord]) -> Result<()> {
    let mut w = open_writer(path)?;
    w.write_record(&est_header()).map_err(|e| write_err(path, e))?;
    for rec in records {
        let row = [
            fmt(rec.t),
            fmt(rec.pos.x),
            fmt(rec.pos.y),
            fmt(rec.pos.z),
            fmt(rec.quat[0]),
            fmt(rec.quat[1]),
            fmt(rec.quat[2]),
            fmt(rec.quat[3]),
            fmt(rec.vel.x),
            fmt(rec.vel.y),
            fmt(rec.vel.z),
        ];
        w.write_record(&row).map_err(|e| write_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_est_csv(path: &Path) -> Result<Vec<EstRecord>> {
    let mut r = open_reader(path)?;
    check_header(path, &mut r, &est_header())?;
    let mut out = Vec::new();
    for record in r.records() {
        let record = record.map_err(|e| Error::csv(path.display().to_string(), e))?;
        if record.len() != 11 {
            return Err(Error::Config(format!(
                "{}: estimate row needs 11 cells, got {}",
                path.display(),
                record.len()
            )));
        }
        let f = |i: usize, what: &str| parse_f64(&record[i], path, what);
        out.push(EstRecord {
            t: f(0, "t")?,
            pos: Vector3::new(f(1, "px")?, f(2, "py")?, f(3, "pz")?),
            quat: [f(4, "qw")?, f(5, "qx")?, f(6, "qy")?, f(7, "qz")?],
            vel: Vector3::new(f(8, "vx")?, f(9, "vy")?, f(10, "vz")?),
        });
    }
    Ok(out)
}

/// Per-update filter health row (diag.csv).
#[derive(Debug, Clone, PartialEq)]
pub struct DiagRecord {
    pub t: f64,
    pub trace_cov: f64,
    /// max |P − Pᵀ| over the covariance.
    pub symmetry_error: f64,
    /// Whether P + εI admitted a Cholesky factorization (ε = PSD slack).
    pub psd: bool,
    pub update_applied: bool,
}

fn diag_header() -> Vec<String> {
    vec![
        "t [s]".into(),
        "trace_cov".into(),
        "symmetry_error".into(),
        "psd".into(),
        "update_applied".into(),
    ]
}

pub fn write_diag_csv(path: &Path, records: &[DiagRecord]) -> Result<()> {
    let mut w = open_writer(path)?;
    w.write_record(&diag_header()).map_err(|e| write_err(path, e))?;
    for rec in records {
        let row = [
            fmt(rec.t),
            fmt(rec.trace_cov),
            fmt(rec.symmetry_error),
            fmt_bool(rec.psd).to_string(),
            fmt_bool(rec.update_applied).to_string(),
        ];
        w.write_record(&row).map_err(|e| write_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_diag_csv(path: &Path) -> Result<Vec<DiagRecord>> {
    let mut r = open_reader(path)?;
    check_header(path, &mut r, &diag_header())?;
    let mut out = Vec::new();
    for record in r.records() {
        let record = record.map_err(|e| Error::csv(path.display().to_string(), e))?;
        if record.len() != 5 {
            return Err(Error::Config(format!(
                "{}: diagnostics row needs 5 cells, got {}",
                path.display(),
                record.len()
            )));
        }
        out.push(DiagRecord {
            t: parse_f64(&record[0], path, "t")?,
            trace_cov: parse_f64(&record[1], path, "trace_cov")?,
            symmetry_error: parse_f64(&record[2], path, "symmetry_error")?,
            psd: parse_bool(&record[3], path, "psd")?,
            update_applied: parse_bool(&record[4], path, "update_applied")?,
        });
    }
    Ok(out)
}

/// One mode-probability row (modes.csv): μ over the bank at an update time.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeRecord {
    pub t: f64,
    pub mu: Vec<f64>,
}

fn mode_header(mode_count: usize) -> Vec<String> {
    let mut h = vec!["t [s]".to_string()];
    for i in 1..=mode_count {
        h.push(format!("mu_{i}"));
    }
    h
}

pub fn write_modes_csv(path: &Path, records: &[ModeRecord]) -> Result<()> {
    let mode_count = records.first().map_or(2, |r| r.mu.len());
    let mut w = open_writer(path)?;
    w.write_record(&mode_header(mode_count)).map_err(|e| write_err(path, e))?;
    for rec in records {
        let mut row = vec![fmt(rec.t)];
        row.extend(rec.mu.iter().map(|m| fmt(*m)));
        w.write_record(&row).map_err(|e| write_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_modes_csv(path: &Path) -> Result<Vec<ModeRecord>> {
    let mut r = open_reader(path)?;
    let headers = r
        .headers()
        .map_err(|e| Error::csv(path.display().to_string(), e))?
        .clone();
    let mode_count = headers.len().saturating_sub(1);
    if mode_count < 1 || headers.iter().collect::<Vec<_>>()
        != mode_header(mode_count).iter().map(|s| s.as_str()).collect::<Vec<_>>()
    {
        return Err(Error::Config(format!(
            "{}: unexpected mode-timeline header",
            path.display()
        )));
    }
    let mut out = Vec::new();
    for record in r.records() {
        let record = record.map_err(|e| Error::csv(path.display().to_string(), e))?;
        if record.len() != mode_count + 1 {
            return Err(Error::Config(format!(
                "{}: mode row needs {} cells, got {}",
                path.display(),
                mode_count + 1,
                record.len()
            )));
        }
        let t = parse_f64(&record[0], path, "t")?;
        let mut mu = Vec::with_capacity(mode_count);
        for i in 0..mode_count {
            mu.push(parse_f64(&record[1 + i], path, "mu")?);
        }
        out.push(ModeRecord { t, mu });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Whole-log convenience layer
// ---------------------------------------------------------------------------

/// File names inside a log directory.
pub const IMU_FILE: &str = "imu.csv";
pub const LEGS_FILE: &str = "legs.csv";
pub const TRUTH_FILE: &str = "truth.csv";
pub const SCENARIO_FILE: &str = "scenario.json";
pub const SLIP_SIDECAR_FILE: &str = "slip_windows.json";

/// Slip metadata sidecar: the scenario's windows echoed verbatim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlipSidecar {
    pub windows: Vec<SlipWindow>,
}

/// Writes a complete simulator log: the three CSV streams, the scenario echo,
/// and the slip-window sidecar.
pub fn write_log(
    dir: &Path,
    truth: &[GroundTruthRecord],
    imu: &[ImuSample],
    legs: &[LegSample],
    config: &ScenarioConfig,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    write_truth_csv(&dir.join(TRUTH_FILE), truth)?;
    write_imu_csv(&dir.join(IMU_FILE), imu)?;
    write_leg_csv(&dir.join(LEGS_FILE), legs)?;
    config.to_json_file(&dir.join(SCENARIO_FILE))?;
    let sidecar = SlipSidecar { windows: config.slip_windows.clone() };
    let path = dir.join(SLIP_SIDECAR_FILE);
    let text = serde_json::to_string_pretty(&sidecar).expect("sidecar serialization");
    std::fs::write(&path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

/// A complete simulator log read back from disk.
#[derive(Debug, Clone)]
pub struct LogBundle {
    pub truth: Vec<TruthRow>,
    pub imu: Vec<ImuSample>,
    pub legs: Vec<LegSample>,
    pub config: ScenarioConfig,
}

pub fn read_log(dir: &Path) -> Result<LogBundle> {
    Ok(LogBundle {
        truth: read_truth_csv(&dir.join(TRUTH_FILE))?,
        imu: read_imu_csv(&dir.join(IMU_FILE))?,
        legs: read_leg_csv(&dir.join(LEGS_FILE))?,
        config: ScenarioConfig::from_json_file(&dir.join(SCENARIO_FILE))?,
    })
}

pub fn read_slip_sidecar(dir: &Path) -> Result<SlipSidecar> {
    let path = dir.join(SLIP_SIDECAR_FILE);
    let text =
        std::fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
}
