//! Centralized extended Kalman filter over all channels.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{validation, Error, Result};
use crate::linalg::{measurement_update, symmetrize};
use crate::signal_model::{
    jacobian, observation_matrix, polar_from_state, propagate, MeasurementWindow, Mode, StateLayout,
    SystemState,
};

pub const DEFAULT_R: f64 = 1e-3;
pub const DEFAULT_Q_MODE: f64 = 1e-9;
pub const DEFAULT_P0: f64 = 1e-2;

/// Noise and initial-covariance tuning of a filter.
///
/// `r_diag` is indexed by channel; `q_mode_diag` covers the trailing `2L`
/// mode entries (the amplitude block of `Q` is always zero); `p0_diag` covers
/// the full state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub r_diag: Vec<f64>,
    pub q_mode_diag: Vec<f64>,
    pub p0_diag: Vec<f64>,
}

/// Scalar knobs from which a [`FilterConfig`] is expanded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tuning {
    pub r: f64,
    pub q_mode: f64,
    pub p0_amplitude: f64,
    pub p0_omega: f64,
    pub p0_sigma: f64,
}

impl Default for Tuning {
    fn default() -> Self {
        Self {
            r: DEFAULT_R,
            q_mode: DEFAULT_Q_MODE,
            p0_amplitude: DEFAULT_P0,
            p0_omega: DEFAULT_P0,
            p0_sigma: DEFAULT_P0,
        }
    }
}

impl Tuning {
    pub fn config(&self, channels: usize, modes: usize) -> FilterConfig {
        let layout = StateLayout::new(channels, modes);
        let mut p0 = vec![self.p0_amplitude; layout.mode_offset()];
        for _ in 0..modes {
            p0.push(self.p0_omega);
            p0.push(self.p0_sigma);
        }
        FilterConfig {
            r_diag: vec![self.r; channels],
            q_mode_diag: vec![self.q_mode; 2 * modes],
            p0_diag: p0,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self, layout: StateLayout) -> Result<()> {
        if self.r_diag.len() != layout.blocks {
            return Err(validation(format!(
                "r_diag has {} entries for {} channels",
                self.r_diag.len(),
                layout.blocks
            )));
        }
        if self.q_mode_diag.len() != 2 * layout.modes {
            return Err(validation(format!(
                "q_mode_diag has {} entries for {} modes",
                self.q_mode_diag.len(),
                layout.modes
            )));
        }
        if self.p0_diag.len() != layout.dim() {
            return Err(validation(format!(
                "p0_diag has {} entries, state has {}",
                self.p0_diag.len(),
                layout.dim()
            )));
        }
        if self.r_diag.iter().any(|&r| !(r.is_finite() && r > 0.0)) {
            return Err(validation("measurement noise variances must be positive"));
        }
        if self
            .q_mode_diag
            .iter()
            .chain(&self.p0_diag)
            .any(|&v| !(v.is_finite() && v >= 0.0))
        {
            return Err(validation("covariance diagonals must be non-negative"));
        }
        Ok(())
    }

    /// Process noise for a state with `blocks` amplitude blocks.
    pub fn q_matrix(&self, blocks: usize) -> DMatrix<f64> {
        let modes = self.q_mode_diag.len() / 2;
        let layout = StateLayout::new(blocks, modes);
        let mut q = DMatrix::zeros(layout.dim(), layout.dim());
        for (i, &v) in self.q_mode_diag.iter().enumerate() {
            let j = layout.mode_offset() + i;
            q[(j, j)] = v;
        }
        q
    }

    pub fn p0_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_column_slice(&self.p0_diag))
    }
}

/// Output of one filter cycle.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub posterior_state: DVector<f64>,
    pub posterior_p: DMatrix<f64>,
    pub predicted_state: DVector<f64>,
    pub predicted_p: DMatrix<f64>,
    pub innovation: DVector<f64>,
}

/// Filter history over a window.
#[derive(Debug, Clone)]
pub struct EstimateTrace {
    pub layout: StateLayout,
    /// Posterior `x̂[k|k]` for every sample.
    pub states: Vec<DVector<f64>>,
    /// Posterior covariance after the last sample.
    pub final_p: DMatrix<f64>,
    /// `(ω, σ)` read from the last posterior.
    pub modes: Vec<Mode>,
    pub innovation_norms: Vec<f64>,
}

impl EstimateTrace {
    pub fn final_state(&self) -> &DVector<f64> {
        self.states.last().expect("trace is never empty")
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Lag-1 autocorrelation of the innovation norms; a rough tuning diagnostic.
    pub fn innovation_lag1(&self) -> f64 {
        lag1_autocorrelation(&self.innovation_norms)
    }
}

pub(crate) fn lag1_autocorrelation(v: &[f64]) -> f64 {
    if v.len() < 3 {
        return 0.0;
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let var: f64 = v.iter().map(|x| (x - mean).powi(2)).sum();
    if var == 0.0 {
        return 0.0;
    }
    v.windows(2).map(|w| (w[0] - mean) * (w[1] - mean)).sum::<f64>() / var
}

/// Measurement update with all channels at once, then one-step prediction.
#[allow(clippy::too_many_arguments)]
pub fn cekf_step(
    prior_state: &DVector<f64>,
    prior_p: &DMatrix<f64>,
    y: &DVector<f64>,
    h: &DMatrix<f64>,
    config: &FilterConfig,
    layout: StateLayout,
    fs: f64,
    step: usize,
) -> Result<StepOutput> {
    if h.nrows() != y.len() || h.ncols() != prior_state.len() || prior_p.shape() != (h.ncols(), h.ncols()) {
        return Err(validation("inconsistent filter dimensions"));
    }
    if config.r_diag.len() != y.len() {
        return Err(validation("r_diag length does not match measurement count"));
    }
    let upd = measurement_update(prior_state, prior_p, h, y, &config.r_diag).map_err(|reason| Error::Divergence {
        step,
        node: None,
        reason,
    })?;
    let (predicted_state, predicted_p) = predict(&upd.x, &upd.p, config, layout, fs);
    Ok(StepOutput {
        posterior_state: upd.x,
        posterior_p: upd.p,
        predicted_state,
        predicted_p,
        innovation: upd.innovation,
    })
}

/// `x̂[k+1|k] = f(x̂[k|k])`, `P[k+1|k] = F P Fᵀ + Q` with `F` taken at `x̂[k|k]`.
pub(crate) fn predict(
    x: &DVector<f64>,
    p: &DMatrix<f64>,
    config: &FilterConfig,
    layout: StateLayout,
    fs: f64,
) -> (DVector<f64>, DMatrix<f64>) {
    let f = jacobian(layout, x, fs);
    let p_next = &f * p * f.transpose() + config.q_matrix(layout.blocks);
    (propagate(layout, x, fs), symmetrize(p_next))
}

pub(crate) fn check_finite(x: &DVector<f64>, step: usize, node: Option<usize>) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Divergence {
            step,
            node,
            reason: "state became non-finite".into(),
        })
    }
}

/// Runs the centralized filter over the whole window starting from `init` as `x̂[0|-1]`.
pub fn cekf_run(window: &MeasurementWindow, init: &SystemState, config: &FilterConfig) -> Result<EstimateTrace> {
    let layout = init.layout();
    if layout.blocks != window.channels() {
        return Err(validation(format!(
            "initial state has {} channels, window has {}",
            layout.blocks,
            window.channels()
        )));
    }
    config.validate(layout)?;
    let h = observation_matrix(layout.blocks, layout.modes);
    let mut x = init.to_vector();
    let mut p = config.p0_matrix();
    let mut states = Vec::with_capacity(window.len());
    let mut innovation_norms = Vec::with_capacity(window.len());
    let mut final_p = p.clone();
    for k in 0..window.len() {
        let out = cekf_step(&x, &p, &window.column(k), &h, config, layout, window.fs, k)?;
        check_finite(&out.posterior_state, k, None)?;
        innovation_norms.push(out.innovation.norm());
        states.push(out.posterior_state);
        final_p = out.posterior_p;
        x = out.predicted_state;
        p = out.predicted_p;
    }
    let modes = layout.modes_of(states.last().expect("window is non-empty"));
    Ok(EstimateTrace {
        layout,
        states,
        final_p,
        modes,
        innovation_norms,
    })
}

/// Reportable description of one mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeEstimate {
    pub freq_hz: f64,
    pub sigma: f64,
    /// Per-channel polar amplitude.
    pub amplitudes: Vec<f64>,
    /// Per-channel phase in radians.
    pub phases: Vec<f64>,
}

/// Converts a state into per-mode reports sorted by frequency.
pub fn extract_modes(state: &SystemState) -> Vec<ModeEstimate> {
    let mut out: Vec<ModeEstimate> = state
        .modes
        .iter()
        .enumerate()
        .map(|(l, mode)| {
            let (amplitudes, phases) = state.amplitudes.iter().map(|ch| polar_from_state(ch.0[l])).unzip();
            ModeEstimate {
                freq_hz: mode.freq_hz(),
                sigma: mode.sigma,
                amplitudes,
                phases,
            }
        })
        .collect();
    out.sort_by(|a, b| a.freq_hz.total_cmp(&b.freq_hz));
    out
}

#[cfg(test)]
mod tests {
    use std::f64::consts::PI;

    use super::*;
    use crate::signal_model::{
        state_from_polar, synthesize_window, ChannelAmplitude, ChannelSpec, ModeSet, NoiseSpec,
    };

    fn scenario(m: usize, l_modes: &[Mode], noise: NoiseSpec, seed: u64) -> crate::signal_model::Synthesis {
        let modes = ModeSet::new(l_modes.to_vec()).unwrap();
        let specs: Vec<_> = (0..m)
            .map(|c| {
                let phases: Vec<f64> = (0..l_modes.len()).map(|l| 0.3 * c as f64 - 0.2 * l as f64).collect();
                ChannelSpec::with_phases(0.6 + 0.35 * c as f64, &phases)
            })
            .collect();
        synthesize_window(&modes, &specs, 30.0, 300, noise, seed).unwrap()
    }

    #[test]
    fn zero_observation_leaves_prior() {
        let layout = StateLayout::new(2, 1);
        let x = DVector::from_vec(vec![0.1, 0.2, -0.3, 0.4, 4.0 * PI, 0.01]);
        let p = DMatrix::identity(6, 6) * 0.5;
        let h = DMatrix::zeros(2, 6);
        let cfg = Tuning::default().config(2, 1);
        let out = cekf_step(&x, &p, &DVector::from_vec(vec![1.0, 2.0]), &h, &cfg, layout, 30.0, 0).unwrap();
        assert_eq!(out.posterior_state, x);
        assert!((&out.posterior_p - &p).amax() < 1e-15);
        assert_eq!(out.predicted_state, propagate(layout, &x, 30.0));
    }

    #[test]
    fn gain_matches_hand_algebra() {
        // M = 1, L = 1 at ω = σ = 0: F = I and H = [1 1 0 0].
        let layout = StateLayout::new(1, 1);
        let (p1, p2, p3, p4, r) = (0.4, 0.9, 0.2, 0.05, 0.1);
        let x = DVector::from_vec(vec![0.3, -0.1, 0.0, 0.0]);
        let p = DMatrix::from_diagonal(&DVector::from_vec(vec![p1, p2, p3, p4]));
        let h = observation_matrix(1, 1);
        let cfg = FilterConfig {
            r_diag: vec![r],
            q_mode_diag: vec![0.0, 0.0],
            p0_diag: vec![0.0; 4],
        };
        let y = 1.0;
        let out = cekf_step(&x, &p, &DVector::from_element(1, y), &h, &cfg, layout, 30.0, 0).unwrap();
        let s = r + p1 + p2;
        let innov = y - (0.3 - 0.1);
        let expect_x = [0.3 + p1 / s * innov, -0.1 + p2 / s * innov, 0.0, 0.0];
        for i in 0..4 {
            assert!((out.posterior_state[i] - expect_x[i]).abs() < 1e-14);
        }
        let expect_p = [
            [p1 - p1 * p1 / s, -p1 * p2 / s, 0.0, 0.0],
            [-p1 * p2 / s, p2 - p2 * p2 / s, 0.0, 0.0],
            [0.0, 0.0, p3, 0.0],
            [0.0, 0.0, 0.0, p4],
        ];
        for i in 0..4 {
            for j in 0..4 {
                assert!((out.posterior_p[(i, j)] - expect_p[i][j]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn batch_equals_sequential_updates() {
        for m in 2..=5 {
            let syn = scenario(m, &[Mode::new(4.0 * PI, 0.0126)], NoiseSpec::SnrDb(30.0), m as u64);
            let layout = syn.truth.layout();
            let mut x = syn.truth.to_vector();
            x[layout.omega_index(0)] *= 1.05;
            let cfg = Tuning::default().config(m, 1);
            let p = cfg.p0_matrix() + DMatrix::from_fn(layout.dim(), layout.dim(), |i, j| if i == j { 0.0 } else { 1e-4 });
            let h = observation_matrix(m, 1);
            let y = syn.window.column(7);
            let batch = cekf_step(&x, &p, &y, &h, &cfg, layout, 30.0, 0).unwrap();

            let (mut xs, mut ps) = (x.clone(), p.clone());
            for j in 0..m {
                let row = h.rows(j, 1).into_owned();
                let upd =
                    measurement_update(&xs, &ps, &row, &DVector::from_element(1, y[j]), &cfg.r_diag[j..=j]).unwrap();
                xs = upd.x;
                ps = upd.p;
            }
            assert!((&batch.posterior_state - &xs).amax() < 1e-10, "M={m}");
            assert!((&batch.posterior_p - &ps).amax() < 1e-10, "M={m}");
        }
    }

    #[test]
    fn noiseless_truth_is_fixed_point() {
        let syn = scenario(5, &[Mode::new(4.0 * PI, 0.0126)], NoiseSpec::Off, 0);
        let trace = cekf_run(&syn.window, &syn.truth, &Tuning::default().config(5, 1)).unwrap();
        assert_eq!(trace.len(), 300);
        let truth = syn.truth.to_vector();
        let layout = syn.truth.layout();
        let mut x = truth.clone();
        for post in &trace.states {
            assert!((post - &x).amax() < 1e-8);
            x = propagate(layout, &x, 30.0);
        }
        let m = trace.modes[0];
        assert!(((m.omega - 4.0 * PI) / (4.0 * PI)).abs() < 1e-8);
        assert!(((m.sigma - 0.0126) / 0.0126).abs() < 1e-8);
    }

    #[test]
    fn two_mode_perturbed_init_converges() {
        let truth_modes = [Mode::from_hz(0.7, 0.3), Mode::from_hz(1.4, 0.05)];
        let syn = scenario(5, &truth_modes, NoiseSpec::Off, 0);
        let mut init = syn.truth.clone();
        for m in &mut init.modes {
            m.omega *= 1.1;
        }
        let mut tuning = Tuning::default();
        tuning.p0_omega = 1.0;
        tuning.p0_amplitude = 1.0;
        tuning.p0_sigma = 0.1;
        let trace = cekf_run(&syn.window, &init, &tuning.config(5, 2)).unwrap();
        for (est, truth) in trace.modes.iter().zip(&truth_modes) {
            assert!(((est.omega - truth.omega) / truth.omega).abs() < 1e-3, "{est:?} vs {truth:?}");
        }
    }

    #[test]
    fn covariance_stays_symmetric_psd() {
        let syn = scenario(3, &[Mode::new(4.0 * PI, 0.0126)], NoiseSpec::SnrDb(30.0), 4);
        let layout = syn.truth.layout();
        let cfg = Tuning::default().config(3, 1);
        let h = observation_matrix(3, 1);
        let (mut x, mut p) = (syn.truth.to_vector() * 0.8, cfg.p0_matrix());
        for k in 0..syn.window.len() {
            let out = cekf_step(&x, &p, &syn.window.column(k), &h, &cfg, layout, 30.0, k).unwrap();
            for m in [&out.posterior_p, &out.predicted_p] {
                assert!((m - m.transpose()).amax() < 1e-10);
                let min = m.clone().symmetric_eigenvalues().min();
                assert!(min > -1e-8, "step {k}: {min}");
            }
            x = out.predicted_state;
            p = out.predicted_p;
        }
    }

    #[test]
    fn run_rejects_mismatched_dimensions() {
        let syn = scenario(2, &[Mode::new(4.0 * PI, 0.0126)], NoiseSpec::Off, 0);
        let wrong = SystemState::zeros(3, &[Mode::new(4.0 * PI, 0.0)]);
        assert!(matches!(
            cekf_run(&syn.window, &wrong, &Tuning::default().config(3, 1)),
            Err(Error::Validation(_))
        ));
        assert!(cekf_run(&syn.window, &syn.truth, &Tuning::default().config(3, 1)).is_err());
    }

    #[test]
    fn divergence_reports_step() {
        let syn = scenario(1, &[Mode::new(4.0 * PI, 0.0126)], NoiseSpec::Off, 0);
        let mut cfg = Tuning::default().config(1, 1);
        cfg.p0_diag = vec![1e300; 4];
        match cekf_run(&syn.window, &syn.truth, &cfg) {
            Err(Error::Divergence { .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn extract_modes_reports_hz_and_polar() {
        let state = SystemState {
            amplitudes: vec![ChannelAmplitude(vec![state_from_polar(1.5, 0.3)])],
            modes: vec![Mode::new(4.0 * PI, 0.0126)],
        };
        let rep = extract_modes(&state);
        assert_eq!(rep.len(), 1);
        assert!((rep[0].freq_hz - 2.0).abs() < 1e-15);
        assert!((rep[0].amplitudes[0] - 1.5).abs() < 1e-10);
        assert!((rep[0].phases[0] - 0.3).abs() < 1e-10);

        let two = SystemState {
            amplitudes: vec![ChannelAmplitude(vec![state_from_polar(1.0, 0.0), state_from_polar(2.0, 0.0)])],
            modes: vec![Mode::from_hz(1.4016, -0.0016), Mode::from_hz(0.6927, 0.4715)],
        };
        let rep = extract_modes(&two);
        assert!((rep[0].freq_hz - 0.6927).abs() < 1e-12 && rep[0].sigma > 0.0);
        assert!((rep[1].freq_hz - 1.4016).abs() < 1e-12 && rep[1].sigma < 0.0);
    }

    #[test]
    fn config_validation() {
        let layout = StateLayout::new(2, 1);
        let mut cfg = Tuning::default().config(2, 1);
        assert!(cfg.validate(layout).is_ok());
        cfg.r_diag[0] = 0.0;
        assert!(cfg.validate(layout).is_err());
        let mut cfg = Tuning::default().config(2, 1);
        cfg.q_mode_diag[1] = -1.0;
        assert!(cfg.validate(layout).is_err());
        let q = Tuning::default().config(2, 1).q_matrix(2);
        assert!(q.view((0, 0), (4, 4)).iter().all(|&v| v == 0.0));
        assert_eq!(q[(4, 4)], DEFAULT_Q_MODE);
    }
}
