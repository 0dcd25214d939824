//! Preprocessing and FFT-based mode detection used to seed the filters.

use std::f64::consts::PI;

use log::warn;
use nalgebra::DMatrix;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::baselines::residue_fit;
use crate::distributed::Topology;
use crate::error::{validation, Result};
use crate::signal_model::{
    state_from_polar, ChannelAmplitude, MeasurementWindow, Mode, ModeComponent, Polar, ReducedState, SystemState,
};

pub const DEFAULT_PROMINENCE: f64 = 5.0;
pub const DEFAULT_MAX_MODES: usize = 3;
pub const MIN_SCAN_SAMPLES: usize = 32;
/// Length of the data prefix used to fit initial amplitudes, in seconds.
pub const AMPLITUDE_FIT_SECONDS: f64 = 2.0;

/// Per-channel affine map applied by [`preprocess`]: `normalized = (raw − offset) / scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelTransform {
    pub offset: f64,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization(pub Vec<ChannelTransform>);

impl Normalization {
    /// Maps a curve in normalized units back to raw units.
    pub fn denormalize(&self, curve: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(curve.nrows(), curve.ncols(), |c, k| {
            let t = self.0[c];
            curve[(c, k)] * t.scale + t.offset
        })
    }

    /// Oscillation amplitudes scale without the offset.
    pub fn denormalize_amplitude(&self, channel: usize, amplitude: f64) -> f64 {
        amplitude * self.0[channel].scale
    }
}

/// Removes each channel's mean and scales it to unit peak deviation.
pub fn preprocess(raw: &MeasurementWindow) -> Result<(MeasurementWindow, Normalization)> {
    if raw.len() < 2 {
        return Err(validation("preprocessing needs at least two samples"));
    }
    let mut out = raw.samples.clone();
    let mut transforms = Vec::with_capacity(raw.channels());
    for c in 0..raw.channels() {
        let row = raw.samples.row(c);
        let offset = row.mean();
        let scale = row.iter().map(|v| (v - offset).abs()).fold(0.0, f64::max);
        if scale == 0.0 {
            return Err(validation(format!("channel {c} is constant")));
        }
        for k in 0..raw.len() {
            out[(c, k)] = (raw.samples[(c, k)] - offset) / scale;
        }
        transforms.push(ChannelTransform { offset, scale });
    }
    Ok((MeasurementWindow::new(out, raw.fs, raw.t0)?, Normalization(transforms)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralPeak {
    pub freq_hz: f64,
    pub magnitude: f64,
    /// Peak magnitude over the median spectral magnitude.
    pub prominence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanOptions {
    pub max_modes: usize,
    pub prominence_threshold: f64,
    /// Scan a single channel instead of the channel average.
    pub channel: Option<usize>,
}

impl Default for ScanOptions {
    fn default() -> Self {
        Self {
            max_modes: DEFAULT_MAX_MODES,
            prominence_threshold: DEFAULT_PROMINENCE,
            channel: None,
        }
    }
}

fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|k| 0.5 - 0.5 * (2.0 * PI * k as f64 / n as f64).cos())
        .collect()
}

/// Averaged Hann-windowed magnitude spectrum of the normalized channels, bins `0..=N/2`.
fn magnitude_spectrum(window: &MeasurementWindow, channels: &[usize]) -> Vec<f64> {
    let n = window.len();
    let taper = hann(n);
    let fft = FftPlanner::new().plan_fft_forward(n);
    let mut acc = vec![0.0; n / 2 + 1];
    for &c in channels {
        let row = window.samples.row(c);
        let mean = row.mean();
        let peak = row.iter().map(|v| (v - mean).abs()).fold(0.0, f64::max);
        if peak == 0.0 {
            continue;
        }
        let mut buf: Vec<Complex<f64>> = row
            .iter()
            .zip(&taper)
            .map(|(v, w)| Complex::new((v - mean) / peak * w, 0.0))
            .collect();
        fft.process(&mut buf);
        for (a, z) in acc.iter_mut().zip(&buf) {
            *a += z.norm();
        }
    }
    let count = channels.len() as f64;
    acc.iter_mut().for_each(|a| *a /= count);
    acc
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Offset in `(-0.5, 0.5)` bins of the vertex of the parabola through three points.
fn parabolic_offset(left: f64, center: f64, right: f64) -> f64 {
    let denom = left - 2.0 * center + right;
    if denom == 0.0 {
        0.0
    } else {
        (0.5 * (left - right) / denom).clamp(-0.5, 0.5)
    }
}

/// Detects spectral peaks standing out from the median magnitude. An empty
/// result means no oscillation was detected.
pub fn fft_mode_scan(window: &MeasurementWindow, options: &ScanOptions) -> Result<Vec<SpectralPeak>> {
    let n = window.len();
    if n < MIN_SCAN_SAMPLES {
        return Err(validation(format!("FFT scan needs at least {MIN_SCAN_SAMPLES} samples, got {n}")));
    }
    let channels: Vec<usize> = match options.channel {
        Some(c) if c >= window.channels() => return Err(validation(format!("channel {c} out of range"))),
        Some(c) => vec![c],
        None => (0..window.channels()).collect(),
    };
    let mag = magnitude_spectrum(window, &channels);
    // bins strictly inside (0, fs/2)
    let last = if n.is_multiple_of(2) { n / 2 - 1 } else { n / 2 };
    let med = median(&mag[1..]);
    if !(med > 0.0) {
        return Ok(Vec::new());
    }
    let bin_hz = window.fs / n as f64;
    let mut peaks: Vec<SpectralPeak> = (1..=last)
        .filter(|&k| {
            let right = mag.get(k + 1).copied().unwrap_or(0.0);
            mag[k] > mag[k - 1] && mag[k] >= right && mag[k] >= options.prominence_threshold * med
        })
        .map(|k| {
            let right = mag.get(k + 1).copied().unwrap_or(mag[k]);
            let delta = parabolic_offset(mag[k - 1], mag[k], right);
            let freq_hz = ((k as f64 + delta) * bin_hz).clamp(0.5 * bin_hz, window.fs / 2.0 - 0.5 * bin_hz);
            SpectralPeak {
                freq_hz,
                magnitude: mag[k],
                prominence: mag[k] / med,
            }
        })
        .collect();
    peaks.sort_by(|a, b| b.magnitude.total_cmp(&a.magnitude));
    peaks.truncate(options.max_modes);
    peaks.sort_by(|a, b| a.freq_hz.total_cmp(&b.freq_hz));
    Ok(peaks)
}

/// Which state shape to initialize.
#[derive(Debug, Clone, Copy)]
pub enum InitLayout<'a> {
    Full,
    Reduced { topology: &'a Topology, node: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub enum InitialState {
    Full(SystemState),
    Reduced(ReducedState),
}

/// Full initial state: frequencies from the peaks, zero damping, amplitudes
/// and phases from a least-squares fit of the first two seconds.
pub fn initial_full_state(peaks: &[SpectralPeak], window: &MeasurementWindow) -> Result<SystemState> {
    if peaks.is_empty() {
        return Err(validation("no spectral peaks to initialize from"));
    }
    let modes: Vec<Mode> = peaks.iter().map(|p| Mode::from_hz(p.freq_hz, 0.0)).collect();
    let head = window.head((AMPLITUDE_FIT_SECONDS * window.fs).round() as usize);
    let residues = residue_fit(&head, &modes).unwrap_or_else(|e| {
        warn!("amplitude initialization fell back to channel RMS: {e}");
        (0..window.channels())
            .map(|c| {
                let rms = window.samples.row(c).norm() / (window.len() as f64).sqrt();
                vec![Polar { amplitude: rms, phase: 0.0 }; modes.len()]
            })
            .collect()
    });
    let amplitudes = residues
        .iter()
        .map(|per_mode| {
            ChannelAmplitude(
                per_mode
                    .iter()
                    .map(|p| state_from_polar(p.amplitude, p.phase))
                    .collect::<Vec<ModeComponent>>(),
            )
        })
        .collect();
    Ok(SystemState { amplitudes, modes })
}

pub fn build_initial_state(
    peaks: &[SpectralPeak],
    window: &MeasurementWindow,
    layout: InitLayout<'_>,
) -> Result<InitialState> {
    let full = initial_full_state(peaks, window)?;
    match layout {
        InitLayout::Full => Ok(InitialState::Full(full)),
        InitLayout::Reduced { topology, node } => {
            if topology.node_count() != window.channels() || node >= topology.node_count() {
                return Err(validation("topology does not match the measurement channels"));
            }
            ReducedState::from_full(&full, node, topology.neighbors(node)).map(InitialState::Reduced)
        }
    }
}
