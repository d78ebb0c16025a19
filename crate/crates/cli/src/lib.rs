//! Command implementations behind the `trotter` binary: simulate a scenario,
//! run an estimator over a recorded log, score an estimate against ground
//! truth, and sweep scenario × estimator grids into a comparison table.
//!
//! Everything here is a plain function over paths so integration tests can
//! drive the exact code the binary runs without spawning processes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use trotter::nalgebra::DMatrix;

use trotter::error::{Error, Result};
use trotter::eval::{Alignment, MetricReport, PoseStamped, Trajectory};
use trotter::imm::ImmParams;
use trotter::kinematics::default_legs;
use trotter::logio::{
    self, EstRecord, LogBundle, TruthRow, IMU_FILE, LEGS_FILE, TRUTH_FILE,
};
use trotter::runner::{initial_state, run_estimator, EstimatorKind, RunConfig, RunOutput};
use trotter::sim::{generate_truth, synthesize_encoders, synthesize_imu, ScenarioConfig};

pub use trotter;

/// Estimated-trajectory CSV written by `estimate`.
pub const EST_FILE: &str = "est.csv";
/// Filter-health CSV written by `estimate`.
pub const DIAG_FILE: &str = "diag.csv";
/// Mode-probability CSV written by `estimate` for bank variants.
pub const MODES_FILE: &str = "modes.csv";
/// Per-run timing summary. Timing is wall clock, so this file is the one
/// output that legitimately differs between otherwise identical re-runs; all
/// numeric CSV outputs stay bit-identical.
pub const RUNTIME_FILE: &str = "runtime.json";
/// Metric report (JSON) written by `evaluate`.
pub const METRICS_JSON_FILE: &str = "metrics.json";
/// Metric report (plain-text table) written by `evaluate`.
pub const METRICS_TEXT_FILE: &str = "metrics.txt";
/// Combined scenario × estimator table written by `sweep`.
pub const SWEEP_FILE: &str = "sweep.csv";
/// Per-cell failure messages written by `sweep`.
pub const SWEEP_ERRORS_FILE: &str = "errors.json";
/// Aggregated timing written by `sweep`.
pub const SWEEP_RUNTIME_FILE: &str = "runtime.json";

/// Metric columns per estimator in the sweep table, in order.
pub const SWEEP_METRICS: [&str; 4] = ["ate_pos", "ate_att", "rpe_pos", "rpe_att"];

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path.display().to_string(), e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::json(path.display().to_string(), e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path.display().to_string(), e))
}

/// What `simulate` wrote and how big it is.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulateSummary {
    pub out_dir: PathBuf,
    pub truth_rows: usize,
    pub imu_rows: usize,
    pub leg_rows: usize,
}

/// Generates a scenario and writes the full log set (truth, IMU, encoders,
/// config echo, slip sidecar) into `out_dir`.
pub fn cmd_simulate(
    config_path: &Path,
    out_dir: &Path,
    seed_override: Option<u64>,
) -> Result<SimulateSummary> {
    let mut config = ScenarioConfig::from_json_file(config_path)?;
    if let Some(seed) = seed_override {
        config.seed = seed;
    }
    config.validate()?;
    let legs = default_legs();
    let truth = generate_truth(&config)?;
    let imu = synthesize_imu(&truth, &config);
    let encoders = synthesize_encoders(&truth, &legs, &config)?;
    create_dir(out_dir)?;
    logio::write_log(out_dir, &truth, &imu, &encoders, &config)?;
    Ok(SimulateSummary {
        out_dir: out_dir.to_path_buf(),
        truth_rows: truth.len(),
        imu_rows: imu.len(),
        leg_rows: encoders.len(),
    })
}

/// Mode-bank overrides supplied on the command line.
#[derive(Debug, Clone, Default)]
pub struct EstimateOptions {
    /// Number of modes; requires matching `alphas` (and `transition` unless
    /// the count already matches the variant's default).
    pub modes: Option<usize>,
    /// Noise scales, weakest first.
    pub alphas: Option<Vec<f64>>,
    /// Row-major Markov transition matrix entries.
    pub transition: Option<Vec<f64>>,
}

impl EstimateOptions {
    pub fn is_empty(&self) -> bool {
        self.modes.is_none() && self.alphas.is_none() && self.transition.is_none()
    }

    /// Builds the bank-parameter override for `kind`, starting from the
    /// variant's defaults. Single-filter variants accept `alphas` too (the
    /// inflated filter takes its scale from the strongest mode).
    pub fn imm_override(&self, kind: EstimatorKind) -> Result<Option<ImmParams>> {
        if self.is_empty() {
            return Ok(None);
        }
        let mut params = kind.imm_params().unwrap_or_else(ImmParams::two_mode);
        if let Some(m) = self.modes {
            if m != params.mode_count() {
                let alphas = self.alphas.as_ref().ok_or_else(|| {
                    Error::Config(format!(
                        "--modes {m} differs from the default {}; supply --alpha with {m} values",
                        params.mode_count()
                    ))
                })?;
                if alphas.len() != m {
                    return Err(Error::Config(format!(
                        "--alpha supplies {} values but --modes is {m}",
                        alphas.len()
                    )));
                }
                params.mu0 = vec![1.0 / m as f64; m];
                params.transition = DMatrix::identity(m, m);
            }
        }
        if let Some(alphas) = &self.alphas {
            params.alphas = alphas.clone();
            if params.mu0.len() != alphas.len() {
                params.mu0 = vec![1.0 / alphas.len() as f64; alphas.len()];
                params.transition = DMatrix::identity(alphas.len(), alphas.len());
            }
        }
        if let Some(entries) = &self.transition {
            let m = params.alphas.len();
            if entries.len() != m * m {
                return Err(Error::Config(format!(
                    "--transition needs {} entries for {m} modes, got {}",
                    m * m,
                    entries.len()
                )));
            }
            params.transition = DMatrix::from_row_slice(m, m, entries);
        }
        params.validate()?;
        Ok(Some(params))
    }
}

/// Runs `kind` over the log in `log_dir` and writes `est.csv`, `diag.csv`,
/// `modes.csv` (bank variants only), and `runtime.json` into `out_dir`.
pub fn cmd_estimate(
    log_dir: &Path,
    kind: EstimatorKind,
    options: &EstimateOptions,
    out_dir: &Path,
) -> Result<RunOutput> {
    let bundle = read_bundle(log_dir)?;
    let output = run_bundle(kind, &bundle, options)?;
    create_dir(out_dir)?;
    logio::write_est_csv(&out_dir.join(EST_FILE), &output.est)?;
    logio::write_diag_csv(&out_dir.join(DIAG_FILE), &output.diag)?;
    if !output.modes.is_empty() {
        logio::write_modes_csv(&out_dir.join(MODES_FILE), &output.modes)?;
    }
    write_json(&out_dir.join(RUNTIME_FILE), &output.runtime)?;
    Ok(output)
}

/// Reads a full simulation log, failing with the missing path when
/// incomplete.
pub fn read_bundle(log_dir: &Path) -> Result<LogBundle> {
    for file in [TRUTH_FILE, IMU_FILE, LEGS_FILE] {
        let path = log_dir.join(file);
        if !path.exists() {
            return Err(Error::Config(format!(
                "log directory {} is missing {file}",
                log_dir.display()
            )));
        }
    }
    logio::read_log(log_dir)
}

/// Runs an estimator over an in-memory log bundle (the core of
/// `cmd_estimate`, reused by `sweep` and the test suites).
pub fn run_bundle(
    kind: EstimatorKind,
    bundle: &LogBundle,
    options: &EstimateOptions,
) -> Result<RunOutput> {
    let truth0 = bundle
        .truth
        .first()
        .ok_or(Error::EmptyTrajectory("truth log"))?;
    let first_legs = bundle
        .legs
        .first()
        .ok_or(Error::EmptyTrajectory("leg log"))?;
    let legs = default_legs();
    let initial = initial_state(truth0, first_legs, &legs)?;
    let mut run = RunConfig::default();
    run.filter.noise = bundle.config.noise.clone();
    run.imm_override = options.imm_override(kind)?;
    run_estimator(kind, &bundle.imu, &bundle.legs, initial, &legs, &run)
}

/// Converts truth rows to a pose trajectory.
pub fn truth_trajectory(rows: &[TruthRow]) -> Result<Trajectory> {
    let samples = rows
        .iter()
        .map(|r| Ok(PoseStamped { t: r.t, pos: r.pos, rot: r.rot()? }))
        .collect::<Result<Vec<_>>>()?;
    Trajectory::new(samples)
}

/// Converts estimate records to a pose trajectory.
pub fn est_trajectory(records: &[EstRecord]) -> Result<Trajectory> {
    let samples = records
        .iter()
        .map(|r| Ok(PoseStamped { t: r.t, pos: r.pos, rot: r.rot()? }))
        .collect::<Result<Vec<_>>>()?;
    Trajectory::new(samples)
}

/// Scores an estimated trajectory against ground truth. Writes
/// `metrics.json` and `metrics.txt` into `out_dir` when given; returns the
/// report plus the rendered table.
pub fn cmd_evaluate(
    est_path: &Path,
    truth_path: &Path,
    align: Alignment,
    rpe_distance: f64,
    out_dir: Option<&Path>,
) -> Result<(MetricReport, String)> {
    let est = est_trajectory(&logio::read_est_csv(est_path)?)?;
    let truth = truth_trajectory(&logio::read_truth_csv(truth_path)?)?;
    let report = MetricReport::compute(&est, &truth, align, rpe_distance)?;
    let label = est_path
        .parent()
        .and_then(|p| p.file_name())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "estimate".to_string());
    let table = report.text_table(&label);
    if let Some(dir) = out_dir {
        create_dir(dir)?;
        write_json(&dir.join(METRICS_JSON_FILE), &report)?;
        fs::write(dir.join(METRICS_TEXT_FILE), &table)
            .map_err(|e| Error::io(dir.join(METRICS_TEXT_FILE).display().to_string(), e))?;
    }
    Ok((report, table))
}

/// Sweep input: which scenarios to run against which estimators.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepManifest {
    /// Scenario config paths, resolved relative to the manifest file.
    pub scenarios: Vec<PathBuf>,
    /// Estimator names; empty means the full roster.
    #[serde(default)]
    pub estimators: Vec<String>,
    /// Seed override applied to every scenario.
    #[serde(default)]
    pub seed: Option<u64>,
    /// ATE alignment (default rigid).
    #[serde(default)]
    pub align: Option<Alignment>,
    /// RPE segment distance in meters (default 1.0).
    #[serde(default)]
    pub rpe_distance: Option<f64>,
}

impl SweepManifest {
    pub fn from_json_file(path: &Path) -> Result<SweepManifest> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut manifest: SweepManifest = serde_json::from_str(&text)
            .map_err(|e| Error::json(path.display().to_string(), e))?;
        if manifest.scenarios.is_empty() {
            return Err(Error::Config("sweep manifest lists no scenarios".into()));
        }
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        for scenario in &mut manifest.scenarios {
            if scenario.is_relative() {
                *scenario = base.join(&scenario);
            }
        }
        Ok(manifest)
    }

    pub fn estimator_kinds(&self) -> Result<Vec<EstimatorKind>> {
        if self.estimators.is_empty() {
            return Ok(EstimatorKind::ALL.to_vec());
        }
        self.estimators.iter().map(|s| s.parse()).collect()
    }
}

/// Timing aggregate across sweep cells.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRuntime {
    /// Mean per-step seconds for every (scenario, estimator) cell.
    pub per_cell: BTreeMap<String, f64>,
    /// Median across scenarios of the per-cell means, per estimator.
    pub median_per_estimator: BTreeMap<String, f64>,
}

/// What `sweep` produced.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepSummary {
    pub table_path: PathBuf,
    pub runtime_path: PathBuf,
    pub cells: usize,
    pub failures: usize,
}

fn median(values: &mut Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("timings are finite"));
    let n = values.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Runs simulate → estimate → evaluate for every (scenario, estimator) cell
/// and writes one combined table (rows = scenarios, columns = estimator ×
/// metric). Cell failures are recorded in `errors.json` and leave their
/// columns empty; other cells are unaffected. Timing goes to `runtime.json`,
/// never into the table, so re-runs with the same seed produce a
/// bit-identical CSV.
pub fn cmd_sweep(
    manifest_path: &Path,
    out_dir: &Path,
    seed_override: Option<u64>,
    estimator_override: &[String],
) -> Result<SweepSummary> {
    let mut manifest = SweepManifest::from_json_file(manifest_path)?;
    if !estimator_override.is_empty() {
        manifest.estimators = estimator_override.to_vec();
    }
    if seed_override.is_some() {
        manifest.seed = seed_override;
    }
    let kinds = manifest.estimator_kinds()?;
    let align = manifest.align.unwrap_or(Alignment::Rigid);
    let rpe_distance = manifest.rpe_distance.unwrap_or(1.0);
    create_dir(out_dir)?;

    let mut header = vec!["scenario".to_string()];
    for kind in &kinds {
        for metric in SWEEP_METRICS {
            header.push(format!("{kind}/{metric}"));
        }
    }
    let mut rows: Vec<Vec<String>> = Vec::new();
    let mut errors: BTreeMap<String, String> = BTreeMap::new();
    let mut per_cell: BTreeMap<String, f64> = BTreeMap::new();
    let mut per_estimator: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut cells = 0usize;

    for scenario_path in &manifest.scenarios {
        let label = scenario_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| scenario_path.display().to_string());
        let mut row = vec![label.clone()];
        let log_dir = out_dir.join("logs").join(&label);
        let truth = match cmd_simulate(scenario_path, &log_dir, manifest.seed)
            .and_then(|_| read_bundle(&log_dir))
            .and_then(|b| truth_trajectory(&b.truth))
        {
            Ok(truth) => truth,
            Err(e) => {
                // The whole row fails together: every estimator needed this log.
                for kind in &kinds {
                    errors.insert(format!("{label}/{kind}"), e.to_string());
                    row.extend(std::iter::repeat_n(String::new(), SWEEP_METRICS.len()));
                    cells += 1;
                }
                rows.push(row);
                continue;
            }
        };
        for kind in &kinds {
            cells += 1;
            let cell_dir = out_dir.join(&label).join(kind.name());
            let result = cmd_estimate(&log_dir, *kind, &EstimateOptions::default(), &cell_dir)
                .and_then(|output| {
                    let est = est_trajectory(&output.est)?;
                    let report = MetricReport::compute(&est, &truth, align, rpe_distance)?;
                    Ok((output, report))
                });
            match result {
                Ok((output, report)) => {
                    for value in [report.ate_pos, report.ate_att, report.rpe_pos, report.rpe_att] {
                        row.push(format!("{value:.16e}"));
                    }
                    per_cell.insert(
                        format!("{label}/{kind}"),
                        output.runtime.mean_step_seconds,
                    );
                    per_estimator
                        .entry(kind.name().to_string())
                        .or_default()
                        .push(output.runtime.mean_step_seconds);
                }
                Err(e) => {
                    errors.insert(format!("{label}/{kind}"), e.to_string());
                    row.extend(std::iter::repeat_n(String::new(), SWEEP_METRICS.len()));
                }
            }
        }
        rows.push(row);
    }

    let table_path = out_dir.join(SWEEP_FILE);
    let mut text = header.join(",") + "\n";
    for row in &rows {
        text.push_str(&row.join(","));
        text.push('\n');
    }
    fs::write(&table_path, text).map_err(|e| Error::io(table_path.display().to_string(), e))?;

    let runtime = SweepRuntime {
        per_cell,
        median_per_estimator: per_estimator
            .into_iter()
            .map(|(k, mut v)| (k, median(&mut v)))
            .collect(),
    };
    let runtime_path = out_dir.join(SWEEP_RUNTIME_FILE);
    write_json(&runtime_path, &runtime)?;
    write_json(&out_dir.join(SWEEP_ERRORS_FILE), &errors)?;

    Ok(SweepSummary {
        table_path,
        runtime_path,
        cells,
        failures: errors.len(),
    })
}

/// Stable machine-readable tag for an error, used in the CLI's stderr JSON.
pub fn error_kind(error: &Error) -> &'static str {
    match error {
        Error::NonOrthonormal { .. } => "non_orthonormal",
        Error::NonFinite(_) => "non_finite",
        Error::NonFiniteState { .. } => "non_finite_state",
        Error::InvalidDt { .. } => "invalid_dt",
        Error::OutOfWorkspace { .. } => "out_of_workspace",
        Error::Infeasible { .. } => "infeasible",
        Error::IllConditioned { .. } => "ill_conditioned",
        Error::Dimension { .. } => "dimension",
        Error::Config(_) => "config",
        Error::EmptyTrajectory(_) => "empty_trajectory",
        Error::NoAssociation { .. } => "no_association",
        Error::Csv { .. } => "csv",
        Error::Io { .. } => "io",
        Error::Json { .. } => "json",
    }
}
