//! Trajectory error metrics (ATE/RPE as RMSE), mode-switching statistics,
//! and the closed-loop spectral-radius stability diagnostic.

use nalgebra::{DMatrix, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::so3::Rotation;

/// Default nearest-neighbor time-association tolerance (s). Simulator streams
/// are synchronous, so association is exact; the tolerance covers resampled
/// logs.
pub const DEFAULT_ASSOC_TOLERANCE: f64 = 1e-3;

/// Default RPE segment distance (m).
pub const DEFAULT_RPE_DISTANCE: f64 = 1.0;

/// A timestamped pose sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseStamped {
    pub t: f64,
    pub pos: Vector3<f64>,
    pub rot: Rotation,
}

/// A pose sequence with strictly increasing timestamps.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub samples: Vec<PoseStamped>,
}

impl Trajectory {
    pub fn new(samples: Vec<PoseStamped>) -> Result<Trajectory> {
        for w in samples.windows(2) {
            if !(w[1].t > w[0].t) {
                return Err(Error::Config(format!(
                    "trajectory timestamps must strictly increase ({} then {})",
                    w[0].t, w[1].t
                )));
            }
        }
        Ok(Trajectory { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// How ATE registers the estimate to the truth before differencing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alignment {
    None,
    /// Closed-form least-squares rigid transform (rotation + translation)
    /// over the associated positions.
    Rigid,
}

impl std::str::FromStr for Alignment {
    type Err = Error;
    fn from_str(s: &str) -> Result<Alignment> {
        match s {
            "none" => Ok(Alignment::None),
            "rigid" => Ok(Alignment::Rigid),
            other => Err(Error::Config(format!(
                "unknown alignment {other:?} (expected \"none\" or \"rigid\")"
            ))),
        }
    }
}

/// Nearest-neighbor time association within `tolerance`. Both inputs must be
/// time-sorted; returns index pairs (est, truth), erroring when no sample
/// associates.
pub fn associate(
    est: &Trajectory,
    truth: &Trajectory,
    tolerance: f64,
) -> Result<Vec<(usize, usize)>> {
    let mut pairs = Vec::new();
    let mut j = 0usize;
    for (i, e) in est.samples.iter().enumerate() {
        while j + 1 < truth.samples.len()
            && (truth.samples[j + 1].t - e.t).abs() <= (truth.samples[j].t - e.t).abs()
        {
            j += 1;
        }
        if j < truth.samples.len() && (truth.samples[j].t - e.t).abs() <= tolerance {
            pairs.push((i, j));
        }
    }
    if pairs.is_empty() {
        return Err(Error::NoAssociation { tolerance });
    }
    Ok(pairs)
}

/// Least-squares rigid registration (Kabsch): rotation and translation
/// mapping `from` points onto `to` points.
fn rigid_fit(from: &[Vector3<f64>], to: &[Vector3<f64>]) -> (Matrix3<f64>, Vector3<f64>) {
    let n = from.len() as f64;
    let c_from: Vector3<f64> = from.iter().sum::<Vector3<f64>>() / n;
    let c_to: Vector3<f64> = to.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::<f64>::zeros();
    for (f, t) in from.iter().zip(to) {
        h += (t - c_to) * (f - c_from).transpose();
    }
    // h = Σ (to−c̄)(from−c̄)ᵀ, so R = U·diag(1,1,d)·Vᵀ maps from → to.
    let svd = h.svd(true, true);
    let u = svd.u.expect("3×3 SVD always yields U");
    let v_t = svd.v_t.expect("3×3 SVD always yields Vᵀ");
    let d = (u * v_t).determinant().signum();
    let fix = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
    let rot = u * fix * v_t;
    let trans = c_to - rot * c_from;
    (rot, trans)
}

/// Absolute trajectory error: (position RMSE in m, attitude RMSE in rad).
/// With `Alignment::Rigid` the estimate is first registered to the truth by
/// the least-squares rigid transform over associated positions; attitude
/// residuals are geodesic angles after applying the alignment rotation.
pub fn ate(est: &Trajectory, truth: &Trajectory, align: Alignment) -> Result<(f64, f64)> {
    let pairs = associate(est, truth, DEFAULT_ASSOC_TOLERANCE)?;
    let (rot_align, t_align) = match align {
        Alignment::None => (Matrix3::identity(), Vector3::zeros()),
        Alignment::Rigid => {
            let from: Vec<_> = pairs.iter().map(|(i, _)| est.samples[*i].pos).collect();
            let to: Vec<_> = pairs.iter().map(|(_, j)| truth.samples[*j].pos).collect();
            rigid_fit(&from, &to)
        }
    };
    let rot_align_r = Rotation::from_matrix_unchecked(rot_align);
    let mut pos_sq = 0.0;
    let mut att_sq = 0.0;
    for (i, j) in &pairs {
        let e = &est.samples[*i];
        let t = &truth.samples[*j];
        let p = rot_align * e.pos + t_align;
        pos_sq += (p - t.pos).norm_squared();
        let aligned_rot = rot_align_r * e.rot;
        let angle = aligned_rot.angle_to(&t.rot);
        att_sq += angle * angle;
    }
    let n = pairs.len() as f64;
    Ok(((pos_sq / n).sqrt(), (att_sq / n).sqrt()))
}

/// Relative pose error over a fixed traveled distance: for every start pair,
/// the first later pair whose ground-truth arc length grows by `distance`
/// defines a segment; the relative transforms of estimate and truth over the
/// segment are compared. Returns (position RMSE in m, attitude RMSE in rad)
/// over all segments.
pub fn rpe(est: &Trajectory, truth: &Trajectory, distance: f64) -> Result<(f64, f64)> {
    if !(distance > 0.0) {
        return Err(Error::Config(format!("rpe distance must be positive, got {distance}")));
    }
    let pairs = associate(est, truth, DEFAULT_ASSOC_TOLERANCE)?;
    // Cumulative truth arc length over the associated samples.
    let mut arc = Vec::with_capacity(pairs.len());
    let mut s = 0.0;
    for (k, (_, j)) in pairs.iter().enumerate() {
        if k > 0 {
            let prev = pairs[k - 1].1;
            s += (truth.samples[*j].pos - truth.samples[prev].pos).norm();
        }
        arc.push(s);
    }
    if arc.last().copied().unwrap_or(0.0) < distance {
        return Err(Error::Config(format!(
            "trajectory covers {:.3} m, shorter than the rpe distance {distance} m",
            arc.last().copied().unwrap_or(0.0)
        )));
    }
    let mut pos_sq = 0.0;
    let mut att_sq = 0.0;
    let mut count = 0usize;
    let mut b = 0usize;
    for a in 0..pairs.len() {
        if b < a + 1 {
            b = a + 1;
        }
        while b < pairs.len() && arc[b] - arc[a] < distance {
            b += 1;
        }
        if b >= pairs.len() {
            break;
        }
        let (ei, ti) = pairs[a];
        let (ej, tj) = pairs[b];
        let (e0, e1) = (&est.samples[ei], &est.samples[ej]);
        let (t0, t1) = (&truth.samples[ti], &truth.samples[tj]);
        // Relative motion expressed in each trajectory's own start frame.
        let d_est = e0.rot.inv_apply(&(e1.pos - e0.pos));
        let d_truth = t0.rot.inv_apply(&(t1.pos - t0.pos));
        pos_sq += (d_est - d_truth).norm_squared();
        let rel_est = e0.rot.transpose() * e1.rot;
        let rel_truth = t0.rot.transpose() * t1.rot;
        let angle = rel_est.angle_to(&rel_truth);
        att_sq += angle * angle;
        count += 1;
    }
    if count == 0 {
        return Err(Error::EmptyTrajectory("no rpe segments of the requested distance"));
    }
    let n = count as f64;
    Ok(((pos_sq / n).sqrt(), (att_sq / n).sqrt()))
}

/// Combined metric summary for one (estimator, scenario) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Position ATE RMSE (m).
    pub ate_pos: f64,
    /// Attitude ATE RMSE (rad).
    pub ate_att: f64,
    /// Position RPE RMSE (m per segment distance).
    pub rpe_pos: f64,
    /// Attitude RPE RMSE (rad per segment distance).
    pub rpe_att: f64,
    /// Associated pose pairs used for ATE.
    pub pose_pairs: usize,
    /// Segments used for RPE.
    pub rpe_segments: usize,
}

impl MetricReport {
    pub fn compute(
        est: &Trajectory,
        truth: &Trajectory,
        align: Alignment,
        rpe_distance: f64,
    ) -> Result<MetricReport> {
        let pairs = associate(est, truth, DEFAULT_ASSOC_TOLERANCE)?;
        let (ate_pos, ate_att) = ate(est, truth, align)?;
        let (rpe_pos, rpe_att) = rpe(est, truth, rpe_distance)?;
        // Re-derive the segment count for the report.
        let mut arc = 0.0;
        let mut segments = 0usize;
        let mut starts = Vec::with_capacity(pairs.len());
        starts.push(0.0);
        for k in 1..pairs.len() {
            arc += (truth.samples[pairs[k].1].pos - truth.samples[pairs[k - 1].1].pos).norm();
            starts.push(arc);
        }
        let mut b = 0usize;
        for a in 0..starts.len() {
            if b < a + 1 {
                b = a + 1;
            }
            while b < starts.len() && starts[b] - starts[a] < rpe_distance {
                b += 1;
            }
            if b >= starts.len() {
                break;
            }
            segments += 1;
        }
        Ok(MetricReport {
            ate_pos,
            ate_att,
            rpe_pos,
            rpe_att,
            pose_pairs: pairs.len(),
            rpe_segments: segments,
        })
    }

    /// Plain-text table, one metric per row.
    pub fn text_table(&self, label: &str) -> String {
        format!(
            "metric            {label}\n\
             ATE_pos [m]       {:.6}\n\
             ATE_att [rad]     {:.6}\n\
             RPE_pos [m/seg]   {:.6}\n\
             RPE_att [rad/seg] {:.6}\n\
             pose pairs        {}\n\
             rpe segments      {}\n",
            self.ate_pos,
            self.ate_att,
            self.rpe_pos,
            self.rpe_att,
            self.pose_pairs,
            self.rpe_segments
        )
    }
}

/// Closed-loop error-propagation matrix `(I − K·H)·F`.
pub fn closed_loop_matrix(
    f: &DMatrix<f64>,
    h: &DMatrix<f64>,
    k: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let n = f.nrows();
    if f.ncols() != n {
        return Err(Error::Dimension { what: "state matrix", expected: n, got: f.ncols() });
    }
    if h.ncols() != n {
        return Err(Error::Dimension { what: "measurement jacobian columns", expected: n, got: h.ncols() });
    }
    if k.nrows() != n {
        return Err(Error::Dimension { what: "gain rows", expected: n, got: k.nrows() });
    }
    if k.ncols() != h.nrows() {
        return Err(Error::Dimension { what: "gain columns", expected: h.nrows(), got: k.ncols() });
    }
    let eye = DMatrix::<f64>::identity(n, n);
    Ok((eye - k * h) * f)
}

/// Spectral radius with a convergence flag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralRadius {
    pub value: f64,
    /// False when the eigensolver and the power-iteration fallback both hit
    /// their iteration caps; `value` is then the best available estimate.
    pub converged: bool,
}

/// Largest eigenvalue magnitude of a square matrix: Schur decomposition
/// first, power iteration with deterministic restarts as a fallback.
pub fn spectral_radius(a: &DMatrix<f64>) -> Result<SpectralRadius> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::Dimension { what: "spectral radius input", expected: n, got: a.ncols() });
    }
    if n == 0 {
        return Ok(SpectralRadius { value: 0.0, converged: true });
    }
    if a.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("spectral radius input"));
    }
    if let Some(schur) = nalgebra::linalg::Schur::try_new(a.clone(), 1e-12, 100_000) {
        let value = schur
            .complex_eigenvalues()
            .iter()
            .map(|l| l.norm())
            .fold(0.0f64, f64::max);
        return Ok(SpectralRadius { value, converged: true });
    }
    // Power iteration on a fixed set of deterministic start vectors.
    let mut best = 0.0f64;
    let mut converged = false;
    for restart in 0..4u64 {
        let mut v = DVectorDeterministic::start(n, restart);
        let mut lambda = 0.0;
        let mut ok = false;
        for _ in 0..10_000 {
            let w = a * &v;
            let norm = w.norm();
            if norm == 0.0 {
                lambda = 0.0;
                ok = true;
                break;
            }
            let next = w / norm;
            if (norm - lambda).abs() <= 1e-9 * norm.max(1.0) {
                lambda = norm;
                ok = true;
                break;
            }
            lambda = norm;
            v = next;
        }
        best = best.max(lambda);
        converged |= ok;
    }
    Ok(SpectralRadius { value: best, converged })
}

/// Deterministic pseudo-random unit start vectors for the power-iteration
/// fallback (no RNG dependency: a fixed multiplicative sequence).
struct DVectorDeterministic;

impl DVectorDeterministic {
    fn start(n: usize, restart: u64) -> nalgebra::DVector<f64> {
        let mut state = 0x9e3779b97f4a7c15u64.wrapping_add(restart.wrapping_mul(0xbf58476d1ce4e5b9));
        let mut v = nalgebra::DVector::<f64>::zeros(n);
        for i in 0..n {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            // Map the top 53 bits to (0, 1), then center.
            let u = ((state >> 11) as f64) / ((1u64 << 53) as f64);
            v[i] = u - 0.5;
        }
        let norm = v.norm();
        if norm == 0.0 {
            v[0] = 1.0;
            v
        } else {
            v / norm
        }
    }
}

/// Summary of a slip-mode probability timeline against the commanded slip
/// windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeTimelineStats {
    /// Mean slip-mode probability at samples inside any window (NaN when no
    /// sample falls inside).
    pub inside_mean: f64,
    /// Mean outside all windows (NaN when every sample is inside).
    pub outside_mean: f64,
    /// Count of dominant-mode changes (slip probability crossing 0.5).
    pub switch_count: usize,
    /// Durations of maximal constant-dominance segments (s), in order.
    pub dwell_times: Vec<f64>,
}

/// Computes the slip-mode timeline statistics. `mu_slip[k]` is the total
/// slip-mode probability at `times[k]`; `windows` are (start, end) intervals.
pub fn mode_timeline_stats(
    times: &[f64],
    mu_slip: &[f64],
    windows: &[(f64, f64)],
) -> Result<ModeTimelineStats> {
    if times.is_empty() || times.len() != mu_slip.len() {
        return Err(Error::EmptyTrajectory("mode timeline"));
    }
    let inside = |t: f64| windows.iter().any(|(a, b)| t >= *a && t < *b);
    let (mut in_sum, mut in_n, mut out_sum, mut out_n) = (0.0, 0usize, 0.0, 0usize);
    for (t, mu) in times.iter().zip(mu_slip) {
        if inside(*t) {
            in_sum += mu;
            in_n += 1;
        } else {
            out_sum += mu;
            out_n += 1;
        }
    }
    let mut switch_count = 0usize;
    let mut dwell_times = Vec::new();
    let mut segment_start = times[0];
    for k in 1..times.len() {
        let flipped = (mu_slip[k] > 0.5) != (mu_slip[k - 1] > 0.5);
        if flipped {
            switch_count += 1;
            dwell_times.push(times[k] - segment_start);
            segment_start = times[k];
        }
    }
    dwell_times.push(times[times.len() - 1] - segment_start);
    Ok(ModeTimelineStats {
        inside_mean: if in_n > 0 { in_sum / in_n as f64 } else { f64::NAN },
        outside_mean: if out_n > 0 { out_sum / out_n as f64 } else { f64::NAN },
        switch_count,
        dwell_times,
    })
}
