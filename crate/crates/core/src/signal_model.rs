//! Damped-sinusoid state-space model.
//!
//! Every channel (PMU) carries, for each oscillation mode, a rotating pair
//! `(xc, xs)`. One sample step rotates the pair by `ω/fs` and scales it by
//! `exp(-σ/fs)`. A channel's measurement is the sum of all `xc + xs` entries
//! in its block, so the observation row has ones over the full `2L` block.
//!
//! The vectorized layout is PMU-major, mode-minor:
//!
//! ```text
//! [xc(1,1) xs(1,1) .. xc(L,1) xs(L,1) | .. | xc(1,M) xs(1,M) .. xs(L,M) | ω1 σ1 .. ωL σL]
//! ```
//!
//! The same layout with `|N_m|` amplitude blocks instead of `M` is used for the
//! reduced per-node states of the distributed filters.

use std::f64::consts::{FRAC_1_SQRT_2, FRAC_PI_4, PI, SQRT_2};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{validation, Error, Result};

/// One oscillation mode: angular frequency (rad/s) and damping factor (1/s).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mode {
    pub omega: f64,
    pub sigma: f64,
}

impl Mode {
    pub fn new(omega: f64, sigma: f64) -> Self {
        Self { omega, sigma }
    }

    pub fn from_hz(freq_hz: f64, sigma: f64) -> Self {
        Self::new(2.0 * PI * freq_hz, sigma)
    }

    pub fn freq_hz(&self) -> f64 {
        self.omega / (2.0 * PI)
    }

    pub fn damping_ratio(&self) -> Result<f64> {
        damping_ratio(self.sigma, self.omega)
    }
}

/// Ordered set of modes shared by all channels, sorted by ascending `ω`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Mode>", into = "Vec<Mode>")]
pub struct ModeSet(Vec<Mode>);

impl ModeSet {
    /// Sorts the modes by frequency; rejects empty input, non-positive or
    /// non-finite frequencies, non-finite damping and duplicate frequencies.
    pub fn new(mut modes: Vec<Mode>) -> Result<Self> {
        if modes.is_empty() {
            return Err(validation("mode set must contain at least one mode"));
        }
        for m in &modes {
            if !m.omega.is_finite() || !m.sigma.is_finite() {
                return Err(validation(format!("non-finite mode {m:?}")));
            }
            if m.omega <= 0.0 {
                return Err(validation(format!("mode frequency must be positive, got {}", m.omega)));
            }
        }
        modes.sort_by(|a, b| a.omega.total_cmp(&b.omega));
        if modes.windows(2).any(|w| w[0].omega == w[1].omega) {
            return Err(validation("duplicate mode frequencies"));
        }
        Ok(Self(modes))
    }

    pub fn single(omega: f64, sigma: f64) -> Result<Self> {
        Self::new(vec![Mode::new(omega, sigma)])
    }

    pub fn modes(&self) -> &[Mode] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl TryFrom<Vec<Mode>> for ModeSet {
    type Error = Error;

    fn try_from(modes: Vec<Mode>) -> Result<Self> {
        Self::new(modes)
    }
}

impl From<ModeSet> for Vec<Mode> {
    fn from(set: ModeSet) -> Self {
        set.0
    }
}

/// Cosine/sine state pair of one mode on one channel.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ModeComponent {
    pub xc: f64,
    pub xs: f64,
}

impl ModeComponent {
    pub fn envelope(&self) -> f64 {
        self.xc.hypot(self.xs)
    }
}

/// Per-mode components of a single channel.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ChannelAmplitude(pub Vec<ModeComponent>);

/// Dimensions of a (full or reduced) state vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateLayout {
    /// Number of amplitude blocks (channels for a full state, neighbors for a reduced one).
    pub blocks: usize,
    /// Number of modes `L`.
    pub modes: usize,
}

impl StateLayout {
    pub fn new(blocks: usize, modes: usize) -> Self {
        Self { blocks, modes }
    }

    pub fn dim(&self) -> usize {
        2 * self.blocks * self.modes + 2 * self.modes
    }

    /// Start of the trailing `(ω, σ)` section.
    pub fn mode_offset(&self) -> usize {
        2 * self.blocks * self.modes
    }

    pub fn block_offset(&self, block: usize) -> usize {
        2 * block * self.modes
    }

    /// Index of `xc` for `(block, mode)`; `xs` follows it.
    pub fn amp_index(&self, block: usize, mode: usize) -> usize {
        2 * (block * self.modes + mode)
    }

    /// Index of `ω` for `mode`; `σ` follows it.
    pub fn omega_index(&self, mode: usize) -> usize {
        self.mode_offset() + 2 * mode
    }

    pub(crate) fn check(&self, v: &DVector<f64>) -> Result<()> {
        if v.len() != self.dim() {
            return Err(validation(format!(
                "state has {} entries, layout {}x{} expects {}",
                v.len(),
                self.blocks,
                self.modes,
                self.dim()
            )));
        }
        Ok(())
    }

    /// Reads the `(ω, σ)` section of a state vector.
    pub fn modes_of(&self, v: &DVector<f64>) -> Vec<Mode> {
        (0..self.modes)
            .map(|l| {
                let i = self.omega_index(l);
                Mode::new(v[i], v[i + 1])
            })
            .collect()
    }
}

/// Full system state: amplitudes of every channel plus the shared modes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemState {
    pub amplitudes: Vec<ChannelAmplitude>,
    pub modes: Vec<Mode>,
}

impl SystemState {
    pub fn zeros(channels: usize, modes: &[Mode]) -> Self {
        Self {
            amplitudes: vec![ChannelAmplitude(vec![ModeComponent::default(); modes.len()]); channels],
            modes: modes.to_vec(),
        }
    }

    pub fn layout(&self) -> StateLayout {
        StateLayout::new(self.amplitudes.len(), self.modes.len())
    }

    pub fn to_vector(&self) -> DVector<f64> {
        let layout = self.layout();
        let mut v = DVector::zeros(layout.dim());
        for (b, ch) in self.amplitudes.iter().enumerate() {
            for (l, c) in ch.0.iter().enumerate() {
                let i = layout.amp_index(b, l);
                v[i] = c.xc;
                v[i + 1] = c.xs;
            }
        }
        for (l, m) in self.modes.iter().enumerate() {
            let i = layout.omega_index(l);
            v[i] = m.omega;
            v[i + 1] = m.sigma;
        }
        v
    }

    pub fn from_vector(layout: StateLayout, v: &DVector<f64>) -> Result<Self> {
        layout.check(v)?;
        let amplitudes = (0..layout.blocks)
            .map(|b| {
                ChannelAmplitude(
                    (0..layout.modes)
                        .map(|l| {
                            let i = layout.amp_index(b, l);
                            ModeComponent { xc: v[i], xs: v[i + 1] }
                        })
                        .collect(),
                )
            })
            .collect();
        Ok(Self {
            amplitudes,
            modes: layout.modes_of(v),
        })
    }

    pub fn propagate(&self, fs: f64) -> Self {
        let layout = self.layout();
        Self::from_vector(layout, &propagate(layout, &self.to_vector(), fs))
            .expect("layout preserved by propagation")
    }
}

/// Per-node state of the reduced-state diffusion filter: amplitudes of the
/// node's neighbors only, plus the shared modes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReducedState {
    pub owner: usize,
    pub neighbor_ids: Vec<usize>,
    pub state: SystemState,
}

impl ReducedState {
    pub fn new(owner: usize, neighbor_ids: Vec<usize>, state: SystemState) -> Result<Self> {
        if !neighbor_ids.windows(2).all(|w| w[0] < w[1]) {
            return Err(validation("neighbor ids must be strictly ascending"));
        }
        if !neighbor_ids.contains(&owner) {
            return Err(validation(format!("node {owner} missing from its own neighbor list")));
        }
        if state.amplitudes.len() != neighbor_ids.len() {
            return Err(validation("one amplitude block per neighbor required"));
        }
        Ok(Self {
            owner,
            neighbor_ids,
            state,
        })
    }

    /// Restricts a full state to the amplitude blocks of `neighbor_ids`.
    pub fn from_full(full: &SystemState, owner: usize, neighbor_ids: &[usize]) -> Result<Self> {
        if let Some(&bad) = neighbor_ids.iter().find(|&&j| j >= full.amplitudes.len()) {
            return Err(validation(format!("neighbor {bad} outside the full state")));
        }
        let state = SystemState {
            amplitudes: neighbor_ids.iter().map(|&j| full.amplitudes[j].clone()).collect(),
            modes: full.modes.clone(),
        };
        Self::new(owner, neighbor_ids.to_vec(), state)
    }

    pub fn layout(&self) -> StateLayout {
        self.state.layout()
    }

    pub fn to_vector(&self) -> DVector<f64> {
        self.state.to_vector()
    }
}

/// A block of synchronized samples, one row per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementWindow {
    /// `M x N` samples.
    pub samples: DMatrix<f64>,
    /// Sample rate in Hz.
    pub fs: f64,
    /// Time of the first sample in seconds.
    pub t0: f64,
}

impl MeasurementWindow {
    pub fn new(samples: DMatrix<f64>, fs: f64, t0: f64) -> Result<Self> {
        if samples.nrows() == 0 || samples.ncols() == 0 {
            return Err(validation("measurement window needs at least one channel and one sample"));
        }
        if !(fs.is_finite() && fs > 0.0) {
            return Err(validation(format!("sample rate must be positive, got {fs}")));
        }
        if !t0.is_finite() {
            return Err(validation("start time must be finite"));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(validation("measurement window contains missing or non-finite samples"));
        }
        Ok(Self { samples, fs, t0 })
    }

    pub fn channels(&self) -> usize {
        self.samples.nrows()
    }

    pub fn len(&self) -> usize {
        self.samples.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.ncols() == 0
    }

    pub fn column(&self, k: usize) -> DVector<f64> {
        self.samples.column(k).into_owned()
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t0 + k as f64 / self.fs
    }

    /// The first `n` samples (or all of them, if shorter).
    pub fn head(&self, n: usize) -> Self {
        let n = n.clamp(1, self.len());
        Self {
            samples: self.samples.columns(0, n).into_owned(),
            fs: self.fs,
            t0: self.t0,
        }
    }
}

/// `ζ = σ / sqrt(σ² + ω²)`.
pub fn damping_ratio(sigma: f64, omega: f64) -> Result<f64> {
    if sigma == 0.0 && omega == 0.0 {
        return Err(Error::Domain("damping ratio undefined for sigma = omega = 0".into()));
    }
    Ok(sigma / sigma.hypot(omega))
}

/// Maps the polar form `a·cos(θ + φ)` onto the `(xc, xs)` pair whose
/// observed sum `xc + xs` reproduces it. Uses `cos θ + sin θ = √2·cos(θ − π/4)`.
pub fn state_from_polar(amplitude: f64, phase: f64) -> ModeComponent {
    let r = amplitude * FRAC_1_SQRT_2;
    let psi = phase + FRAC_PI_4;
    ModeComponent {
        xc: r * psi.cos(),
        xs: r * psi.sin(),
    }
}

/// Inverse of [`state_from_polar`]. Phase is wrapped to `(-π, π]`.
pub fn polar_from_state(c: ModeComponent) -> (f64, f64) {
    let amplitude = SQRT_2 * c.envelope();
    if amplitude == 0.0 {
        return (0.0, 0.0);
    }
    (amplitude, wrap_phase(c.xs.atan2(c.xc) - FRAC_PI_4))
}

pub(crate) fn wrap_phase(p: f64) -> f64 {
    let mut w = (p + PI).rem_euclid(2.0 * PI) - PI;
    if w <= -PI {
        w += 2.0 * PI;
    }
    w
}

/// One-sample prediction `f(x)`: rotate-and-decay every `(xc, xs)` pair,
/// keep `(ω, σ)` unchanged.
pub fn propagate(layout: StateLayout, x: &DVector<f64>, fs: f64) -> DVector<f64> {
    debug_assert_eq!(x.len(), layout.dim());
    let mut out = x.clone();
    for l in 0..layout.modes {
        let wi = layout.omega_index(l);
        let (omega, sigma) = (x[wi], x[wi + 1]);
        let decay = (-sigma / fs).exp();
        let (s, c) = (omega / fs).sin_cos();
        for b in 0..layout.blocks {
            let i = layout.amp_index(b, l);
            let (xc, xs) = (x[i], x[i + 1]);
            out[i] = decay * (xc * c - xs * s);
            out[i + 1] = decay * (xc * s + xs * c);
        }
    }
    out
}

/// Analytic Jacobian of [`propagate`] at `x`.
pub fn jacobian(layout: StateLayout, x: &DVector<f64>, fs: f64) -> DMatrix<f64> {
    let n = layout.dim();
    let mut jac = DMatrix::zeros(n, n);
    for i in layout.mode_offset()..n {
        jac[(i, i)] = 1.0;
    }
    for l in 0..layout.modes {
        let wi = layout.omega_index(l);
        let (omega, sigma) = (x[wi], x[wi + 1]);
        let decay = (-sigma / fs).exp();
        let (s, c) = (omega / fs).sin_cos();
        for b in 0..layout.blocks {
            let i = layout.amp_index(b, l);
            let (xc, xs) = (x[i], x[i + 1]);
            let xc_next = decay * (xc * c - xs * s);
            let xs_next = decay * (xc * s + xs * c);

            jac[(i, i)] = decay * c;
            jac[(i, i + 1)] = -decay * s;
            jac[(i + 1, i)] = decay * s;
            jac[(i + 1, i + 1)] = decay * c;

            jac[(i, wi)] = -xs_next / fs;
            jac[(i + 1, wi)] = xc_next / fs;
            jac[(i, wi + 1)] = -xc_next / fs;
            jac[(i + 1, wi + 1)] = -xs_next / fs;
        }
    }
    jac
}

/// Centralized observation matrix: row `m` sums channel `m`'s `2L` block.
pub fn observation_matrix(channels: usize, modes: usize) -> DMatrix<f64> {
    let layout = StateLayout::new(channels, modes);
    let mut h = DMatrix::zeros(channels, layout.dim());
    for m in 0..channels {
        let start = layout.block_offset(m);
        for j in start..start + 2 * modes {
            h[(m, j)] = 1.0;
        }
    }
    h
}

/// Observation matrix of a reduced state: row `i` sums the local block of
/// the `i`-th neighbor. Only the neighbor count matters for the pattern.
pub fn reduced_observation_matrix(neighbor_ids: &[usize], modes: usize) -> DMatrix<f64> {
    observation_matrix(neighbor_ids.len(), modes)
}

pub fn observe(x: &DVector<f64>, h: &DMatrix<f64>) -> Result<DVector<f64>> {
    if h.ncols() != x.len() {
        return Err(validation(format!(
            "observation matrix has {} columns, state has {} entries",
            h.ncols(),
            x.len()
        )));
    }
    Ok(h * x)
}

/// Observed channels over `n` steps starting from `initial`, one column per sample.
pub fn fitted_curve(initial: &SystemState, fs: f64, n: usize) -> DMatrix<f64> {
    let layout = initial.layout();
    let h = observation_matrix(layout.blocks, layout.modes);
    let mut x = initial.to_vector();
    let mut out = DMatrix::zeros(layout.blocks, n);
    for k in 0..n {
        out.set_column(k, &(&h * &x));
        x = propagate(layout, &x, fs);
    }
    out
}

/// Polar description of one mode on one channel, `a·cos(θ + φ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Polar {
    pub amplitude: f64,
    pub phase: f64,
}

/// Synthesis parameters of one channel: outer scale and per-mode polar terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelSpec {
    pub scale: f64,
    pub components: Vec<Polar>,
}

impl ChannelSpec {
    /// Unit-amplitude modes with the given phases.
    pub fn with_phases(scale: f64, phases: &[f64]) -> Self {
        Self {
            scale,
            components: phases.iter().map(|&phase| Polar { amplitude: 1.0, phase }).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum NoiseSpec {
    Off,
    /// Per-channel SNR in dB relative to the channel's unscaled clean signal power.
    SnrDb(f64),
    /// Fixed standard deviation inside the scale bracket.
    Std(f64),
}

/// Output of [`synthesize_window`]. `clean` and `noise` are the scaled parts
/// whose sum is `window.samples`.
#[derive(Debug, Clone)]
pub struct Synthesis {
    pub window: MeasurementWindow,
    pub truth: SystemState,
    pub clean: DMatrix<f64>,
    pub noise: DMatrix<f64>,
}

/// Generates `m_c · [Σ_l a_l e^{-σ_l k/fs} cos(ω_l k/fs + φ_l) + ε_c[k]]` for every channel.
pub fn synthesize_window(
    modes: &ModeSet,
    channels: &[ChannelSpec],
    fs: f64,
    n: usize,
    noise: NoiseSpec,
    seed: u64,
) -> Result<Synthesis> {
    if n == 0 {
        return Err(validation("sample count must be at least 1"));
    }
    if channels.is_empty() {
        return Err(validation("at least one channel required"));
    }
    if !(fs.is_finite() && fs > 0.0) {
        return Err(validation(format!("sample rate must be positive, got {fs}")));
    }
    match noise {
        NoiseSpec::SnrDb(db) if !db.is_finite() => return Err(validation("SNR must be finite")),
        NoiseSpec::Std(s) if !(s.is_finite() && s >= 0.0) => {
            return Err(validation("noise std must be finite and non-negative"))
        }
        _ => {}
    }
    let l = modes.len();
    for (c, spec) in channels.iter().enumerate() {
        if !(spec.scale.is_finite() && spec.scale > 0.0) {
            return Err(validation(format!("channel {c}: scale must be positive and finite")));
        }
        if spec.components.len() != l {
            return Err(validation(format!(
                "channel {c}: {} components for {l} modes",
                spec.components.len()
            )));
        }
        if spec
            .components
            .iter()
            .any(|p| !p.amplitude.is_finite() || !p.phase.is_finite() || p.amplitude < 0.0)
        {
            return Err(validation(format!("channel {c}: invalid amplitude or phase")));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = channels.len();
    let mut clean = DMatrix::zeros(m, n);
    let mut noise_part = DMatrix::zeros(m, n);
    for (c, spec) in channels.iter().enumerate() {
        let bracket: Vec<f64> = (0..n)
            .map(|k| {
                let t = k as f64 / fs;
                modes
                    .modes()
                    .iter()
                    .zip(&spec.components)
                    .map(|(mode, p)| p.amplitude * (-mode.sigma * t).exp() * (mode.omega * t + p.phase).cos())
                    .sum()
            })
            .collect();
        let std = match noise {
            NoiseSpec::Off => 0.0,
            NoiseSpec::Std(s) => s,
            NoiseSpec::SnrDb(db) => {
                let power = bracket.iter().map(|v| v * v).sum::<f64>() / n as f64;
                (power / 10f64.powf(db / 10.0)).sqrt()
            }
        };
        for (k, v) in bracket.iter().enumerate() {
            clean[(c, k)] = spec.scale * v;
            if std > 0.0 {
                let e: f64 = StandardNormal.sample(&mut rng);
                noise_part[(c, k)] = spec.scale * std * e;
            }
        }
    }

    let truth = SystemState {
        amplitudes: channels
            .iter()
            .map(|spec| {
                ChannelAmplitude(
                    spec.components
                        .iter()
                        .map(|p| state_from_polar(spec.scale * p.amplitude, p.phase))
                        .collect(),
                )
            })
            .collect(),
        modes: modes.modes().to_vec(),
    };
    let window = MeasurementWindow::new(&clean + &noise_part, fs, 0.0)?;
    Ok(Synthesis {
        window,
        truth,
        clean,
        noise: noise_part,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const FS: f64 = 30.0;
    const OMEGA: f64 = 4.0 * PI;
    const SIGMA: f64 = 0.0126;

    fn single_state(channels: usize, c: ModeComponent, omega: f64, sigma: f64) -> SystemState {
        SystemState {
            amplitudes: vec![ChannelAmplitude(vec![c]); channels],
            modes: vec![Mode::new(omega, sigma)],
        }
    }

    #[test]
    fn damping_ratio_values() {
        let z = damping_ratio(SIGMA, OMEGA).unwrap();
        assert!((z - 0.001).abs() < 1e-5, "{z}");
        assert_eq!(damping_ratio(0.0, 2.0 * PI).unwrap(), 0.0);
        assert_eq!(damping_ratio(1.0, 0.0).unwrap(), 1.0);
        assert!(damping_ratio(-0.5, 3.0).unwrap() < 0.0);
        assert!(matches!(damping_ratio(0.0, 0.0), Err(Error::Domain(_))));
    }

    #[test]
    fn mode_set_sorts_and_rejects_duplicates() {
        let set = ModeSet::new(vec![Mode::new(3.0, 0.1), Mode::new(1.0, -0.2)]).unwrap();
        assert_eq!(set.modes()[0].omega, 1.0);
        assert!(ModeSet::new(vec![Mode::new(1.0, 0.0), Mode::new(1.0, 0.2)]).is_err());
        assert!(ModeSet::new(vec![]).is_err());
        assert!(ModeSet::new(vec![Mode::new(0.0, 0.0)]).is_err());
        assert!(ModeSet::new(vec![Mode::new(f64::NAN, 0.0)]).is_err());
    }

    #[test]
    fn polar_conversion_examples() {
        let c = state_from_polar(1.0, 0.0);
        assert!((c.xc - 0.5).abs() < 1e-15 && (c.xs - 0.5).abs() < 1e-15);
        // sum of the rotating pair follows cos(θk) exactly
        let state = single_state(1, c, OMEGA, 0.0);
        let mut x = state.to_vector();
        let layout = state.layout();
        for k in 0..100 {
            let expected = (OMEGA * k as f64 / FS).cos();
            assert!((x[0] + x[1] - expected).abs() < 1e-12, "k={k}");
            x = propagate(layout, &x, FS);
        }
        assert_eq!(state_from_polar(0.0, 1.3), ModeComponent { xc: 0.0, xs: 0.0 });
        let c = state_from_polar(2.0, PI);
        assert!((c.xc + c.xs + 2.0).abs() < 1e-12);

        let (a, p) = polar_from_state(state_from_polar(1.5, 0.3));
        assert!((a - 1.5).abs() < 1e-12 && (p - 0.3).abs() < 1e-12);
        let (a, p) = polar_from_state(state_from_polar(0.7, -3.0));
        assert!((a - 0.7).abs() < 1e-12 && (p + 3.0).abs() < 1e-12);
    }

    #[test]
    fn propagate_examples() {
        let layout = StateLayout::new(1, 1);
        let x = DVector::from_vec(vec![1.0, 0.0, FS * PI / 2.0, 0.0]);
        let y = propagate(layout, &x, FS);
        assert!(y[0].abs() < 1e-15 && (y[1] - 1.0).abs() < 1e-15);
        assert_eq!(y[2], x[2]);
        assert_eq!(y[3], x[3]);

        let mut x = DVector::from_vec(vec![0.3, -1.1, OMEGA, SIGMA]);
        let start = x[0].hypot(x[1]);
        for _ in 0..30 {
            x = propagate(layout, &x, FS);
        }
        let ratio = x[0].hypot(x[1]) / start;
        assert!((ratio - (-SIGMA).exp()).abs() < 1e-14);
        assert!((ratio - 0.98748).abs() < 1e-5);
    }

    #[test]
    fn jacobian_identity_cases() {
        let layout = StateLayout::new(2, 1);
        let x = DVector::from_vec(vec![0.4, 0.1, -0.2, 0.9, 0.0, 0.0]);
        let jac = jacobian(layout, &x, FS);
        let amp = jac.view((0, 0), (4, 4));
        assert_eq!(amp.into_owned(), DMatrix::identity(4, 4));
        // mode rows are identity rows
        let x = DVector::from_vec(vec![0.4, 0.1, -0.2, 0.9, 5.0, -0.3]);
        let jac = jacobian(layout, &x, FS);
        for r in 4..6 {
            for c in 0..6 {
                assert_eq!(jac[(r, c)], if r == c { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn observation_matrix_examples() {
        let h = observation_matrix(2, 1);
        let expected = DMatrix::from_row_slice(2, 6, &[1., 1., 0., 0., 0., 0., 0., 0., 1., 1., 0., 0.]);
        assert_eq!(h, expected);
        for m in 1..=5 {
            for l in 1..=3 {
                let h = observation_matrix(m, l);
                assert!(h.row_iter().all(|r| r.sum() == 2.0 * l as f64));
                let off = StateLayout::new(m, l).mode_offset();
                assert!(h.columns(off, 2 * l).iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn reduced_observation_matrix_examples() {
        let h = reduced_observation_matrix(&[0, 1, 4], 1);
        assert_eq!(h.shape(), (3, 8));
        for (r, cols) in [(0, [0, 1]), (1, [2, 3]), (2, [4, 5])] {
            for c in 0..8 {
                let want = if cols.contains(&c) { 1.0 } else { 0.0 };
                assert_eq!(h[(r, c)], want);
            }
        }
        let h = reduced_observation_matrix(&[2], 2);
        assert_eq!(h.shape(), (1, 8));
        assert_eq!(h.row(0).iter().copied().collect::<Vec<_>>(), vec![1., 1., 1., 1., 0., 0., 0., 0.]);

        let x = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let y = observe(&x, &reduced_observation_matrix(&[0, 1, 4], 1)).unwrap();
        assert_eq!(y.as_slice(), &[3.0, 7.0, 11.0]);
        assert!(observe(&DVector::zeros(3), &observation_matrix(1, 1)).is_err());
    }

    #[test]
    fn fitted_curve_examples() {
        let state = single_state(1, state_from_polar(1.0, 0.0), OMEGA, SIGMA);
        let curve = fitted_curve(&state, FS, 300);
        for k in 0..300 {
            let t = k as f64 / FS;
            let want = (-SIGMA * t).exp() * (OMEGA * t).cos();
            assert!((curve[(0, k)] - want).abs() < 1e-12);
        }
        let zero = single_state(3, ModeComponent::default(), OMEGA, SIGMA);
        assert!(fitted_curve(&zero, FS, 50).iter().all(|&v| v == 0.0));

        let m1 = Mode::new(1.4 * PI, 0.47);
        let m2 = Mode::new(2.8 * PI, -0.0016);
        let c1 = state_from_polar(1.0, 0.4);
        let c2 = state_from_polar(0.6, -1.0);
        let both = SystemState {
            amplitudes: vec![ChannelAmplitude(vec![c1, c2])],
            modes: vec![m1, m2],
        };
        let a = SystemState {
            amplitudes: vec![ChannelAmplitude(vec![c1])],
            modes: vec![m1],
        };
        let b = SystemState {
            amplitudes: vec![ChannelAmplitude(vec![c2])],
            modes: vec![m2],
        };
        let sum = fitted_curve(&a, FS, 200) + fitted_curve(&b, FS, 200);
        assert!((fitted_curve(&both, FS, 200) - sum).amax() < 1e-12);
    }

    #[test]
    fn synthesize_closed_form_samples() {
        let modes = ModeSet::single(OMEGA, SIGMA).unwrap();
        let syn = synthesize_window(&modes, &[ChannelSpec::with_phases(1.0, &[0.0])], FS, 300, NoiseSpec::Off, 1)
            .unwrap();
        assert!((syn.window.samples[(0, 0)] - 1.0).abs() < 1e-15);
        assert!((syn.window.samples[(0, 30)] - 0.98748).abs() < 1e-5);
        assert!((syn.window.samples[(0, 30)] - (-SIGMA).exp()).abs() < 1e-12);
        // ground truth reproduces the clean window
        let curve = fitted_curve(&syn.truth, FS, 300);
        assert!((curve - &syn.clean).amax() < 1e-12);
    }

    #[test]
    fn undamped_envelope_is_constant() {
        let omega = 2.0 * PI * 1.5;
        let modes = ModeSet::single(omega, 0.0).unwrap();
        let specs = [ChannelSpec::with_phases(1.0, &[0.0]), ChannelSpec::with_phases(2.5, &[0.0])];
        let syn = synthesize_window(&modes, &specs, FS, 200, NoiseSpec::Off, 1).unwrap();
        // 20 samples per period, phase 0 hits the peak each period
        for c in 0..2 {
            let peaks: Vec<f64> = (0..10)
                .map(|p| {
                    (p * 20..(p + 1) * 20)
                        .map(|k| syn.window.samples[(c, k)].abs())
                        .fold(0.0, f64::max)
                })
                .collect();
            assert!(peaks.iter().all(|v| (v - peaks[0]).abs() < 1e-9));
        }
    }

    #[test]
    fn snr_request_is_met() {
        let modes = ModeSet::single(OMEGA, SIGMA).unwrap();
        let specs: Vec<_> = (0..5).map(|c| ChannelSpec::with_phases(0.5 + c as f64 * 0.3, &[0.2 * c as f64])).collect();
        let syn = synthesize_window(&modes, &specs, FS, 300, NoiseSpec::SnrDb(50.0), 9).unwrap();
        for c in 0..5 {
            let ps = syn.clean.row(c).iter().map(|v| v * v).sum::<f64>();
            let pn = syn.noise.row(c).iter().map(|v| v * v).sum::<f64>();
            let snr = 10.0 * (ps / pn).log10();
            assert!((48.0..=52.0).contains(&snr), "channel {c}: {snr}");
        }
    }

    #[test]
    fn synthesize_rejects_bad_input() {
        let modes = ModeSet::single(OMEGA, SIGMA).unwrap();
        let good = ChannelSpec::with_phases(1.0, &[0.0]);
        assert!(synthesize_window(&modes, &[good.clone()], FS, 0, NoiseSpec::Off, 0).is_err());
        assert!(synthesize_window(&modes, &[ChannelSpec::with_phases(0.0, &[0.0])], FS, 10, NoiseSpec::Off, 0).is_err());
        assert!(synthesize_window(&modes, &[ChannelSpec::with_phases(1.0, &[f64::NAN])], FS, 10, NoiseSpec::Off, 0).is_err());
        assert!(synthesize_window(&modes, &[good], f64::INFINITY, 10, NoiseSpec::Off, 0).is_err());
    }

    #[test]
    fn measurement_window_rejects_gaps() {
        let mut s = DMatrix::zeros(2, 4);
        s[(1, 2)] = f64::NAN;
        assert!(MeasurementWindow::new(s, 30.0, 0.0).is_err());
        assert!(MeasurementWindow::new(DMatrix::zeros(1, 4), 0.0, 0.0).is_err());
    }

    #[test]
    fn reduced_state_checks_neighbors() {
        let full = SystemState::zeros(5, &[Mode::new(1.0, 0.0)]);
        let r = ReducedState::from_full(&full, 2, &[1, 2, 3]).unwrap();
        assert_eq!(r.layout().dim(), 2 * 3 + 2);
        assert!(ReducedState::from_full(&full, 0, &[1, 2]).is_err());
        assert!(ReducedState::from_full(&full, 1, &[2, 1]).is_err());
        assert!(ReducedState::from_full(&full, 1, &[1, 7]).is_err());
    }
}
