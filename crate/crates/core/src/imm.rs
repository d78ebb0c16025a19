//! Interacting-multiple-model engine over a bank of mode-conditioned filters.
//!
//! Every mode runs the same filter and the same measurement model; modes
//! differ only in the scale `α` applied to the foot-velocity process noise
//! (`α = 1` is nominal rolling, larger values weaken the rolling constraint
//! and represent slip). One step is the classic cycle:
//!
//! 1. **mix** — probability-weighted re-initialization of every mode from all
//!    modes (Markov transition matrix Π),
//! 2. **per-mode predict** over the IMU window and the shared contact update,
//! 3. **likelihood** of each mode's innovation, evaluated in log space,
//! 4. **probability update** with flooring so dormant modes stay revivable,
//! 5. **fusion** — moment-matched combination of the mode posteriors.
//!
//! States live on a manifold (the orientation block), so mixing and fusion
//! average *error vectors* taken about a reference mode (the most probable
//! one) and re-inject the average — plain weighted sums would leave SO(3).

use nalgebra::{DMatrix, DVector, Vector3};

use crate::error::{Error, Result};
use crate::eskf::{stack_foot_measurements, ContactModel, Eskf, FilterConfig};
use crate::kinematics::{LegParams, LEG_COUNT};
use crate::state::{layout, ImuSample, LegSample, RobotState};

/// Log-space likelihood floor (≈ 1e-300 in linear space): prevents a mode's
/// probability from collapsing to exactly zero.
pub const LOG_LIKELIHOOD_FLOOR: f64 = -690.0;

/// Default lower clamp on mode probabilities; keeps dormant modes revivable.
pub const DEFAULT_MU_FLOOR: f64 = 1e-6;

/// How the fused output combines the mode posteriors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionRule {
    /// Weight each mode by its posterior probability (the standard IMM).
    ByProbability,
    /// Fixed equal weights — the "no interaction" ablation pairs this with an
    /// identity transition matrix.
    EqualWeight,
}

/// Bank construction parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ImmParams {
    /// Foot-velocity noise scale per mode; `alphas[0]` must be 1.
    pub alphas: Vec<f64>,
    /// Markov mode-transition matrix (row-stochastic, M×M).
    pub transition: DMatrix<f64>,
    /// Initial mode probabilities.
    pub mu0: Vec<f64>,
    /// When false, the mixing stage is skipped (modes never exchange state);
    /// pair with an identity transition matrix.
    pub interaction: bool,
    pub fusion: FusionRule,
    pub mu_floor: f64,
}

impl ImmParams {
    /// Nominal + slip, moderately sticky transitions. The slip scale gives
    /// the slip mode enough per-interval foot-velocity freedom to track a
    /// slide within a few updates, while the nominal mode stays rigid over a
    /// stance.
    pub fn two_mode() -> ImmParams {
        ImmParams {
            alphas: vec![1.0, 100.0],
            transition: DMatrix::from_row_slice(2, 2, &[0.99, 0.01, 0.02, 0.98]),
            mu0: vec![0.5, 0.5],
            interaction: true,
            fusion: FusionRule::ByProbability,
            mu_floor: DEFAULT_MU_FLOOR,
        }
    }

    /// Nominal, mild slip, severe slip.
    pub fn three_mode() -> ImmParams {
        ImmParams {
            alphas: vec![1.0, 10.0, 100.0],
            transition: DMatrix::from_row_slice(
                3,
                3,
                &[
                    0.98, 0.015, 0.005, //
                    0.02, 0.96, 0.02, //
                    0.005, 0.015, 0.98,
                ],
            ),
            mu0: vec![1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
            interaction: true,
            fusion: FusionRule::ByProbability,
            mu_floor: DEFAULT_MU_FLOOR,
        }
    }

    /// Independent filters with equal-weight fusion: the ablation that
    /// removes mode interaction entirely.
    pub fn no_interaction() -> ImmParams {
        ImmParams {
            alphas: vec![1.0, 100.0],
            transition: DMatrix::identity(2, 2),
            mu0: vec![0.5, 0.5],
            interaction: false,
            fusion: FusionRule::EqualWeight,
            mu_floor: DEFAULT_MU_FLOOR,
        }
    }

    pub fn mode_count(&self) -> usize {
        self.alphas.len()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.alphas.len();
        if m < 2 {
            return Err(Error::Config(format!(
                "mode bank needs at least two modes, got {m} (a single mode is just the plain filter)"
            )));
        }
        if self.alphas[0] != 1.0 {
            return Err(Error::Config(format!(
                "alphas[0] must be 1 (nominal rolling mode), got {}",
                self.alphas[0]
            )));
        }
        for w in self.alphas.windows(2) {
            if !(w[1] >= w[0]) {
                return Err(Error::Config(format!(
                    "alphas must be non-decreasing, got {:?}",
                    self.alphas
                )));
            }
        }
        if self.alphas.iter().any(|a| !a.is_finite() || *a < 1.0) {
            return Err(Error::Config(format!(
                "every alpha must be finite and at least 1, got {:?}",
                self.alphas
            )));
        }
        if self.transition.nrows() != m || self.transition.ncols() != m {
            return Err(Error::Config(format!(
                "transition matrix must be {m}×{m}, got {}×{}",
                self.transition.nrows(),
                self.transition.ncols()
            )));
        }
        for i in 0..m {
            let row = self.transition.row(i);
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(Error::Config(format!(
                    "transition row {i} has negative or non-finite entries"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-12 {
                return Err(Error::Config(format!(
                    "transition row {i} must sum to 1, got {sum}"
                )));
            }
        }
        if self.mu0.len() != m {
            return Err(Error::Config(format!(
                "mu0 must have {m} entries, got {}",
                self.mu0.len()
            )));
        }
        if self.mu0.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Config("mu0 entries must be non-negative".into()));
        }
        let sum: f64 = self.mu0.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("mu0 must sum to 1, got {sum}")));
        }
        if !(self.mu_floor >= 0.0 && self.mu_floor < 1.0 / m as f64) {
            return Err(Error::Config(format!(
                "mu_floor must lie in [0, 1/M), got {}",
                self.mu_floor
            )));
        }
        Ok(())
    }
}

/// The mode-conditioned filters plus the current mode probabilities.
#[derive(Debug, Clone)]
pub struct ModeBank {
    pub modes: Vec<Eskf>,
    pub mu: Vec<f64>,
    pub params: ImmParams,
    /// Predicted probabilities from the most recent mixing stage, consumed by
    /// the next measurement cycle (initialized to the priors).
    pending_mu_bar: Vec<f64>,
    /// Mixing-degeneracy flags paired with `pending_mu_bar`.
    pending_degenerate: Vec<bool>,
}

/// Per-mode initial conditions produced by the mixing stage.
#[derive(Debug, Clone)]
pub struct MixOutcome {
    pub states: Vec<RobotState>,
    pub covs: Vec<DMatrix<f64>>,
    pub mu_bar: Vec<f64>,
    /// True where the predicted probability mass was zero and the mode kept
    /// its prior unmixed.
    pub degenerate: Vec<bool>,
}

/// Per-mode diagnostics for one step.
#[derive(Debug, Clone, Copy)]
pub struct ModeStepDiag {
    /// Log-likelihood of the innovation; `None` when no foot was in stance.
    pub log_likelihood: Option<f64>,
    pub update_applied: bool,
    pub innovation_norm: f64,
    pub mix_degenerate: bool,
}

/// Fused output of one step. Mode posteriors stay inside the bank.
#[derive(Debug, Clone)]
pub struct ImmStepOutcome {
    pub state: RobotState,
    pub cov: DMatrix<f64>,
    pub mu: Vec<f64>,
    pub modes: Vec<ModeStepDiag>,
}

/// Builds a bank whose modes all start from the same state and covariance.
pub fn build_bank(
    initial: RobotState,
    config: FilterConfig,
    params: ImmParams,
) -> Result<ModeBank> {
    params.validate()?;
    config.validate()?;
    let modes = (0..params.mode_count())
        .map(|_| Eskf::new(initial.clone(), config.clone()))
        .collect();
    let mu = params.mu0.clone();
    let pending_mu_bar = params.mu0.clone();
    let pending_degenerate = vec![false; params.mode_count()];
    Ok(ModeBank { modes, mu, params, pending_mu_bar, pending_degenerate })
}

/// Gaussian innovation log-density `ln N(r; 0, S)`; −∞ when S is not positive
/// definite. Likelihood ratios across modes should be formed in log space and
/// exponentiated after subtracting the maximum.
pub fn mode_log_likelihood(residual: &DVector<f64>, innovation_cov: &DMatrix<f64>) -> f64 {
    let n = residual.len();
    let chol = match nalgebra::Cholesky::new(innovation_cov.clone()) {
        Some(c) => c,
        None => return f64::NEG_INFINITY,
    };
    let solved = chol.solve(residual);
    let quad = residual.dot(&solved);
    let log_det: f64 = chol.l_dirty().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
    -0.5 * (quad + log_det + n as f64 * (2.0 * std::f64::consts::PI).ln())
}

/// Linear-space likelihood with the collapse floor applied.
pub fn mode_likelihood(residual: &DVector<f64>, innovation_cov: &DMatrix<f64>) -> f64 {
    mode_log_likelihood(residual, innovation_cov)
        .max(LOG_LIKELIHOOD_FLOOR)
        .exp()
}

/// Posterior mode probabilities `μᵢ ∝ Λᵢ·μ̄ᵢ`, clamped to `[mu_floor, 1]` and
/// renormalized.
pub fn update_mode_probs(likelihoods: &[f64], mu_bar: &[f64], mu_floor: f64) -> Vec<f64> {
    debug_assert_eq!(likelihoods.len(), mu_bar.len());
    let mut mu: Vec<f64> = likelihoods
        .iter()
        .zip(mu_bar)
        .map(|(l, m)| l * m)
        .collect();
    let sum: f64 = mu.iter().sum();
    if sum <= 0.0 || !sum.is_finite() {
        // All mass floored away (or worse): fall back to the predicted probs.
        mu.copy_from_slice(mu_bar);
    } else {
        for p in mu.iter_mut() {
            *p /= sum;
        }
    }
    for p in mu.iter_mut() {
        *p = p.clamp(mu_floor, 1.0);
    }
    let sum: f64 = mu.iter().sum();
    for p in mu.iter_mut() {
        *p /= sum;
    }
    mu
}

impl ModeBank {
    /// Mixing stage: per-mode initial conditions from the probability-weighted
    /// combination of all modes. Vector blocks mix linearly; the orientation
    /// mixes by averaging boxminus residuals about the highest-weight mode and
    /// re-injecting. An identity transition matrix passes every mode through
    /// untouched (the weights become exact Kronecker deltas and the manifold
    /// ops short-circuit on zero deltas).
    pub fn mix(&self) -> MixOutcome {
        let m = self.modes.len();
        let pi = &self.params.transition;
        let mut states = Vec::with_capacity(m);
        let mut covs = Vec::with_capacity(m);
        let mut mu_bar = vec![0.0; m];
        let mut degenerate = vec![false; m];

        for i in 0..m {
            mu_bar[i] = (0..m).map(|j| pi[(j, i)] * self.mu[j]).sum();
        }

        for i in 0..m {
            if mu_bar[i] <= 0.0 {
                degenerate[i] = true;
                states.push(self.modes[i].state.clone());
                covs.push(self.modes[i].cov.clone());
                continue;
            }
            let weights: Vec<f64> = (0..m)
                .map(|j| pi[(j, i)] * self.mu[j] / mu_bar[i])
                .collect();
            let reference = argmax(&weights);
            let ref_state = &self.modes[reference].state;

            let mut delta = DVector::<f64>::zeros(layout::DIM);
            for j in 0..m {
                if weights[j] == 0.0 || j == reference {
                    continue;
                }
                delta += self.modes[j].state.boxminus(ref_state) * weights[j];
            }
            let mut mixed = ref_state.clone();
            mixed.inject(&delta);

            let mut cov = DMatrix::<f64>::zeros(layout::DIM, layout::DIM);
            for j in 0..m {
                if weights[j] == 0.0 {
                    continue;
                }
                let spread = self.modes[j].state.boxminus(&mixed);
                cov += (&self.modes[j].cov + &spread * spread.transpose()) * weights[j];
            }
            states.push(mixed);
            covs.push(cov);
        }
        MixOutcome { states, covs, mu_bar, degenerate }
    }

    /// Mixing stage of a new cycle: re-initializes the modes from the
    /// probability-weighted combination and stores the predicted mode
    /// probabilities for the cycle's measurement update. With interaction
    /// disabled only the Markov probability prediction runs.
    pub fn begin_cycle(&mut self) {
        let m = self.modes.len();
        if self.params.interaction {
            let mixed = self.mix();
            for i in 0..m {
                if !mixed.degenerate[i] {
                    self.modes[i].state = mixed.states[i].clone();
                    self.modes[i].cov = mixed.covs[i].clone();
                }
            }
            self.pending_mu_bar = mixed.mu_bar;
            self.pending_degenerate = mixed.degenerate;
        } else {
            let pi = &self.params.transition;
            self.pending_mu_bar = (0..m)
                .map(|i| (0..m).map(|j| pi[(j, i)] * self.mu[j]).sum())
                .collect();
            self.pending_degenerate = vec![false; m];
        }
    }

    /// Propagates every mode through one IMU interval with its own noise
    /// scale.
    pub fn predict_all(&mut self, imu: &ImuSample, dt: f64) -> Result<()> {
        for i in 0..self.modes.len() {
            let alpha = self.params.alphas[i];
            self.modes[i].predict(imu, dt, alpha)?;
        }
        Ok(())
    }

    /// Measurement stage: contact transitions, per-mode update, innovation
    /// likelihoods (log space, common max subtracted before exponentiation),
    /// and the mode-probability update against the pending mixed
    /// probabilities.
    pub fn update_cycle(
        &mut self,
        sample: &LegSample,
        prev_flags: &[bool; LEG_COUNT],
        legs: &[LegParams; LEG_COUNT],
        model: ContactModel,
        raw_gyro: &Vector3<f64>,
    ) -> Vec<ModeStepDiag> {
        let m = self.modes.len();
        let mut log_likelihoods: Vec<Option<f64>> = vec![None; m];
        let mut diags = Vec::with_capacity(m);
        for i in 0..m {
            self.modes[i].on_contact_transition(prev_flags, sample, legs);
            let mode = &mut self.modes[i];
            let meas = stack_foot_measurements(
                &mode.state,
                sample,
                model,
                legs,
                raw_gyro,
                &mode.config.contact_normal_vector(),
                &mode.config.noise.clone(),
            );
            let (applied, innovation_norm) = match meas {
                Some(meas) => {
                    let out = mode.update(&meas);
                    let ll = if out.applied {
                        mode_log_likelihood(&out.residual, &out.innovation_cov)
                            .max(LOG_LIKELIHOOD_FLOOR)
                    } else {
                        LOG_LIKELIHOOD_FLOOR
                    };
                    log_likelihoods[i] = Some(ll);
                    (out.applied, out.residual.norm())
                }
                None => (false, 0.0),
            };
            diags.push(ModeStepDiag {
                log_likelihood: log_likelihoods[i],
                update_applied: applied,
                innovation_norm,
                mix_degenerate: self.pending_degenerate[i],
            });
        }

        self.mu = if log_likelihoods.iter().all(|l| l.is_some()) {
            let lls: Vec<f64> = log_likelihoods.iter().map(|l| l.unwrap()).collect();
            let max_ll = lls.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = lls.iter().map(|l| (l - max_ll).exp()).collect();
            update_mode_probs(&weights, &self.pending_mu_bar, self.params.mu_floor)
        } else {
            // No stance feet ⇒ no evidence; probabilities follow the Markov
            // prediction alone (clamped so the Σμ=1 invariant stays exact).
            update_mode_probs(&vec![1.0; m], &self.pending_mu_bar, self.params.mu_floor)
        };
        // A second update without an intervening mix sees the posterior.
        self.pending_mu_bar = self.mu.clone();
        self.pending_degenerate = vec![false; m];
        diags
    }

    /// Moment-matched estimate from the current posteriors under the bank's
    /// fusion rule.
    pub fn fused(&self) -> (RobotState, DMatrix<f64>) {
        let m = self.modes.len();
        let weights = match self.params.fusion {
            FusionRule::ByProbability => self.mu.clone(),
            FusionRule::EqualWeight => vec![1.0 / m as f64; m],
        };
        fuse_weighted(&self.modes, &weights)
    }

    /// One full IMM cycle over a leg-sample interval: mix, propagate every
    /// mode through the IMU window, update against the leg sample, fuse.
    /// `raw_gyro` is the latest uncorrected rate (used by the measurement
    /// builders, debiased per mode). Mode posteriors stay in the bank; the
    /// returned estimate is the moment-matched fusion.
    pub fn step(
        &mut self,
        imu_window: &[(ImuSample, f64)],
        sample: &LegSample,
        prev_flags: &[bool; LEG_COUNT],
        legs: &[LegParams; LEG_COUNT],
        model: ContactModel,
        raw_gyro: &Vector3<f64>,
    ) -> Result<ImmStepOutcome> {
        self.begin_cycle();
        for (imu, dt) in imu_window {
            self.predict_all(imu, *dt)?;
        }
        let diags = self.update_cycle(sample, prev_flags, legs, model, raw_gyro);
        let (state, cov) = self.fused();
        Ok(ImmStepOutcome { state, cov, mu: self.mu.clone(), modes: diags })
    }
}

/// Moment-matched fusion of the bank's posteriors under `mu`: error-vector
/// averaging about the max-probability mode for the state, probability-
/// weighted covariances plus spread terms for P.
pub fn fuse(bank: &ModeBank, mu: &[f64]) -> (RobotState, DMatrix<f64>) {
    fuse_weighted(&bank.modes, mu)
}

fn fuse_weighted(modes: &[Eskf], weights: &[f64]) -> (RobotState, DMatrix<f64>) {
    debug_assert_eq!(modes.len(), weights.len());
    let reference = argmax(weights);
    let ref_state = &modes[reference].state;

    let mut delta = DVector::<f64>::zeros(layout::DIM);
    for (j, mode) in modes.iter().enumerate() {
        if weights[j] == 0.0 || j == reference {
            continue;
        }
        delta += mode.state.boxminus(ref_state) * weights[j];
    }
    let mut fused = ref_state.clone();
    fused.inject(&delta);

    let mut cov = DMatrix::<f64>::zeros(layout::DIM, layout::DIM);
    for (j, mode) in modes.iter().enumerate() {
        if weights[j] == 0.0 {
            continue;
        }
        let spread = mode.state.boxminus(&fused);
        cov += (&mode.cov + &spread * spread.transpose()) * weights[j];
    }
    let cov = (&cov + cov.transpose()) * 0.5;
    (fused, cov)
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eskf::NoiseConfig;
    use crate::kinematics::{default_legs, forward_kinematics, JointState};
    use crate::so3::Rotation;
    use crate::state::LegObservation;
    use approx::assert_relative_eq;

    fn bank_with(params: ImmParams) -> ModeBank {
        build_bank(RobotState::default(), FilterConfig::default(), params).unwrap()
    }

    #[test]
    fn build_bank_defaults_and_presets() {
        let bank = bank_with(ImmParams::two_mode());
        assert_eq!(bank.modes.len(), 2);
        assert_eq!(bank.mu, vec![0.5, 0.5]);
        assert_eq!(bank.modes[0].state, bank.modes[1].state);
        assert_eq!(bank.modes[0].cov, bank.modes[1].cov);

        let bank3 = bank_with(ImmParams::three_mode());
        assert_eq!(bank3.modes.len(), 3);
        let sum: f64 = bank3.mu.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn build_bank_rejects_bad_configs() {
        let mut p = ImmParams::two_mode();
        p.transition = DMatrix::from_row_slice(2, 2, &[0.5, 0.6, 0.02, 0.98]);
        assert!(build_bank(RobotState::default(), FilterConfig::default(), p).is_err());

        let mut p = ImmParams::two_mode();
        p.alphas = vec![2.0, 100.0];
        assert!(p.validate().is_err());

        let mut p = ImmParams::two_mode();
        p.alphas = vec![1.0, 0.5];
        assert!(p.validate().is_err());

        let mut p = ImmParams::two_mode();
        p.alphas = vec![1.0];
        p.mu0 = vec![1.0];
        p.transition = DMatrix::identity(1, 1);
        assert!(p.validate().is_err());

        // Equal alphas are allowed — that is the degenerate-equivalence setup.
        let mut p = ImmParams::two_mode();
        p.alphas = vec![1.0, 1.0];
        assert!(p.validate().is_ok());
    }

    #[test]
    fn mix_with_identity_transition_passes_modes_through_exactly() {
        let mut bank = bank_with(ImmParams::two_mode());
        bank.params.transition = DMatrix::identity(2, 2);
        bank.mu = vec![0.3, 0.7];
        bank.modes[0].state.pos = Vector3::new(1.0, 2.0, 3.0);
        bank.modes[1].state.pos = Vector3::new(-1.0, 0.5, 0.2);
        bank.modes[1].state.rot = Rotation::exp(&Vector3::new(0.3, -0.1, 0.2));
        bank.modes[1].cov[(0, 0)] = 9.0;

        let mixed = bank.mix();
        assert_eq!(mixed.mu_bar, bank.mu);
        for i in 0..2 {
            assert_eq!(mixed.states[i], bank.modes[i].state);
            assert_eq!(mixed.covs[i], bank.modes[i].cov);
            assert!(!mixed.degenerate[i]);
        }
    }

    #[test]
    fn mix_predicted_probabilities_follow_the_transition_matrix() {
        let mut bank = bank_with(ImmParams::two_mode());
        bank.params.transition = DMatrix::from_row_slice(2, 2, &[0.95, 0.05, 0.05, 0.95]);
        bank.mu = vec![0.9, 0.1];
        let mixed = bank.mix();
        assert_relative_eq!(mixed.mu_bar[0], 0.86, epsilon = 1e-12);
        assert_relative_eq!(mixed.mu_bar[1], 0.14, epsilon = 1e-12);
    }

    #[test]
    fn mix_of_identical_states_averages_covariances_only() {
        let mut bank = bank_with(ImmParams::two_mode());
        bank.mu = vec![0.6, 0.4];
        bank.modes[0].cov = DMatrix::identity(layout::DIM, layout::DIM) * 2.0;
        bank.modes[1].cov = DMatrix::identity(layout::DIM, layout::DIM) * 4.0;
        let mixed = bank.mix();
        // Identical states ⇒ spread terms vanish; the mixed covariance is the
        // conditional-probability-weighted average.
        let pi = &bank.params.transition;
        for i in 0..2 {
            let w0 = pi[(0, i)] * bank.mu[0] / mixed.mu_bar[i];
            let w1 = pi[(1, i)] * bank.mu[1] / mixed.mu_bar[i];
            let expected = w0 * 2.0 + w1 * 4.0;
            assert_relative_eq!(mixed.covs[i][(5, 5)], expected, epsilon = 1e-12);
            assert_eq!(mixed.states[i], bank.modes[0].state);
        }
    }

    #[test]
    fn mix_flags_modes_starved_of_probability_mass() {
        let mut bank = bank_with(ImmParams::two_mode());
        // Column 2 of Π is all zero: nothing ever transitions into mode 2.
        bank.params.transition = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 0.0]);
        bank.modes[1].state.pos = Vector3::new(5.0, 0.0, 0.0);
        let prior = bank.modes[1].state.clone();
        let mixed = bank.mix();
        assert!(mixed.degenerate[1]);
        assert!(!mixed.degenerate[0]);
        assert_eq!(mixed.states[1], prior);
        assert_eq!(mixed.mu_bar[1], 0.0);
    }

    #[test]
    fn mode_likelihood_matches_scalar_gaussian() {
        let r = DVector::from_element(1, 1.0);
        let s = DMatrix::from_element(1, 1, 1.0);
        let expected = (-0.5f64).exp() / (2.0 * std::f64::consts::PI).sqrt();
        assert_relative_eq!(mode_likelihood(&r, &s), expected, epsilon = 1e-12);
        assert!((mode_likelihood(&r, &s) - 0.24197).abs() < 1e-5);
    }

    #[test]
    fn mode_likelihood_zero_residual_is_the_normalizer() {
        let r = DVector::zeros(2);
        let s = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 0.5]));
        let det = 1.0f64; // 2.0 × 0.5
        let expected = 1.0 / ((2.0 * std::f64::consts::PI).powi(2) * det).sqrt();
        assert_relative_eq!(mode_likelihood(&r, &s), expected, epsilon = 1e-12);
    }

    #[test]
    fn mode_likelihood_scaling_s_by_four_halves_it_at_zero_residual() {
        let r = DVector::zeros(1);
        let s1 = DMatrix::from_element(1, 1, 1.0);
        let s4 = DMatrix::from_element(1, 1, 4.0);
        assert_relative_eq!(
            mode_likelihood(&r, &s1) / mode_likelihood(&r, &s4),
            2.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn mode_likelihood_floors_on_singular_s() {
        let r = DVector::from_element(2, 1.0);
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(mode_log_likelihood(&r, &s), f64::NEG_INFINITY);
        assert_relative_eq!(mode_likelihood(&r, &s), LOG_LIKELIHOOD_FLOOR.exp());
    }

    #[test]
    fn update_mode_probs_normalizes_products() {
        let mu = update_mode_probs(&[2.0, 1.0], &[0.5, 0.5], 1e-6);
        assert_relative_eq!(mu[0], 2.0 / 3.0, epsilon = 1e-12);
        assert_relative_eq!(mu[1], 1.0 / 3.0, epsilon = 1e-12);

        let mu = update_mode_probs(&[0.7, 0.7], &[0.25, 0.75], 1e-6);
        assert_relative_eq!(mu[0], 0.25, epsilon = 1e-12);
        assert_relative_eq!(mu[1], 0.75, epsilon = 1e-12);
    }

    #[test]
    fn update_mode_probs_floor_keeps_probabilities_interior() {
        let mu = update_mode_probs(&[1.0, 0.0], &[0.5, 0.5], 1e-6);
        assert!(mu[1] > 0.0 && mu[1] < 1e-5);
        assert!(mu[0] < 1.0);
        assert!((mu[0] + mu[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn likelihood_ratios_are_invariant_to_common_scaling() {
        let mu_bar = [0.3, 0.55, 0.15];
        let lambda = [3.2e-8, 1.7e-6, 4.4e-7];
        let scaled: Vec<f64> = lambda.iter().map(|l| l * 1e12).collect();
        let a = update_mode_probs(&lambda, &mu_bar, 1e-6);
        let b = update_mode_probs(&scaled, &mu_bar, 1e-6);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn fuse_degenerate_weights_return_that_mode() {
        let mut bank = bank_with(ImmParams::two_mode());
        bank.modes[1].state.pos = Vector3::new(3.0, -1.0, 0.5);
        bank.modes[1].state.rot = Rotation::exp(&Vector3::new(0.0, 0.0, 1.0));
        let (state, cov) = fuse(&bank, &[0.0, 1.0]);
        assert_eq!(state, bank.modes[1].state);
        assert_eq!(cov, bank.modes[1].cov);

        let (state, _) = fuse(&bank, &[1.0, 0.0]);
        assert_eq!(state, bank.modes[0].state);
    }

    #[test]
    fn fuse_identical_modes_is_exact_passthrough() {
        let bank = bank_with(ImmParams::two_mode());
        let (state, cov) = fuse(&bank, &[0.5, 0.5]);
        assert_eq!(state, bank.modes[0].state);
        assert_eq!(cov, bank.modes[0].cov);
    }

    #[test]
    fn fuse_adds_the_spread_of_disagreeing_modes() {
        let mut bank = bank_with(ImmParams::two_mode());
        bank.modes[1].state.pos = bank.modes[0].state.pos + Vector3::new(0.1, 0.0, 0.0);
        let base_cov = bank.modes[0].cov[(0, 0)];
        let (state, cov) = fuse(&bank, &[0.5, 0.5]);
        assert_relative_eq!(state.pos.x, 0.05, epsilon = 1e-15);
        // Spread term: 0.5·(−0.05)² + 0.5·(0.05)² = 0.0025 on the δp_x diag.
        assert_relative_eq!(cov[(0, 0)], base_cov + 0.0025, epsilon = 1e-15);
    }

    /// A bank stepped with real measurement rows: probabilities stay a
    /// distribution, posteriors stay finite, and the fused state tracks the
    /// (static, perfectly consistent) setup.
    #[test]
    fn step_on_consistent_static_data_keeps_invariants() {
        let legs = default_legs();
        let mut state = RobotState::default();
        state.pos = Vector3::new(0.0, 0.0, 0.42);
        let joints = JointState::from_angles(Vector3::new(0.0, 0.55, -1.2));
        let mut sample = LegSample { t: 0.002, legs: [LegObservation::default(); 4] };
        for foot in 0..LEG_COUNT {
            sample.legs[foot] = LegObservation { joints, contact: true };
            state.foot_pos[foot] = state.pos + forward_kinematics(&joints, &legs[foot]);
        }

        let mut noise = NoiseConfig::default();
        noise.sigma_a = 0.0;
        noise.sigma_w = 0.0;
        let config = FilterConfig { noise, ..FilterConfig::default() };
        let mut bank = build_bank(state.clone(), config, ImmParams::two_mode()).unwrap();

        let imu = ImuSample { t: 0.0, gyro: Vector3::zeros(), accel: Vector3::new(0.0, 0.0, 9.81) };
        let window = [(imu, 0.002)];
        let prev = sample.contact_flags();
        for k in 0..50 {
            let mut s = sample;
            s.t = 0.002 * (k + 1) as f64;
            let out = bank
                .step(&window, &s, &prev, &legs, ContactModel::Rolling, &Vector3::zeros())
                .unwrap();
            let total: f64 = out.mu.iter().sum();
            assert!((total - 1.0).abs() < 1e-12, "Σμ = {total}");
            assert!(out.state.is_finite());
            assert!((out.state.pos - state.pos).norm() < 1e-6);
            for d in &out.modes {
                assert!(d.log_likelihood.is_some());
            }
        }
    }

    /// With every foot in swing there is no evidence: probabilities follow the
    /// Markov prediction and the fused state is just the propagated one.
    #[test]
    fn step_without_stance_feet_uses_predicted_probabilities() {
        let legs = default_legs();
        let mut bank = bank_with(ImmParams::two_mode());
        bank.mu = vec![0.9, 0.1];
        let sample = LegSample { t: 0.002, legs: [LegObservation::default(); 4] };
        let imu = ImuSample { t: 0.0, gyro: Vector3::zeros(), accel: Vector3::new(0.0, 0.0, 9.81) };
        let prev = [false; 4];
        let out = bank
            .step(&[(imu, 0.002)], &sample, &prev, &legs, ContactModel::Rolling, &Vector3::zeros())
            .unwrap();
        let pi = &bank.params.transition;
        let expected0 = pi[(0, 0)] * 0.9 + pi[(1, 0)] * 0.1;
        assert_relative_eq!(out.mu[0], expected0, epsilon = 1e-9);
        assert!(out.modes.iter().all(|d| d.log_likelihood.is_none()));
    }
}
