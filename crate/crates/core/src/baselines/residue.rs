use nalgebra::{DMatrix, DVector};

use crate::error::{validation, Result};
use crate::signal_model::{MeasurementWindow, Mode, Polar};

/// Condition number above which the damped basis is considered degenerate.
const MAX_BASIS_CONDITION: f64 = 1e10;

fn basis(modes: &[Mode], fs: f64, n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, 2 * modes.len(), |k, col| {
        let mode = modes[col / 2];
        let t = k as f64 / fs;
        let env = (-mode.sigma * t).exp();
        if col % 2 == 0 {
            env * (mode.omega * t).cos()
        } else {
            -env * (mode.omega * t).sin()
        }
    })
}

/// Per-channel least-squares amplitudes and phases of fixed damped modes.
/// Returns `[channel][mode]`; time is measured from the first sample.
pub fn residue_fit(window: &MeasurementWindow, modes: &[Mode]) -> Result<Vec<Vec<Polar>>> {
    if modes.is_empty() {
        return Err(validation("at least one mode required"));
    }
    if modes.iter().any(|m| !m.omega.is_finite() || !m.sigma.is_finite()) {
        return Err(validation("non-finite mode"));
    }
    for (i, a) in modes.iter().enumerate() {
        if modes[i + 1..].iter().any(|b| a == b) {
            return Err(validation("duplicate modes in residue fit"));
        }
    }
    let n = window.len();
    if n < 2 * modes.len() {
        return Err(validation("window too short for the requested modes"));
    }
    let phi = basis(modes, window.fs, n);
    let svd = phi.svd(true, true);
    let (lo, hi) = (svd.singular_values.min(), svd.singular_values.max());
    if !(lo > 0.0) || hi / lo > MAX_BASIS_CONDITION {
        return Err(validation(format!(
            "damped basis is ill-conditioned (singular values {lo:e}..{hi:e}); modes too close?"
        )));
    }
    (0..window.channels())
        .map(|c| {
            let y = DVector::from_iterator(n, window.samples.row(c).iter().copied());
            let coef = svd.solve(&y, 0.0).map_err(|e| validation(e.to_string()))?;
            Ok((0..modes.len())
                .map(|l| {
                    let (a, b) = (coef[2 * l], coef[2 * l + 1]);
                    let amplitude = a.hypot(b);
                    Polar {
                        amplitude,
                        phase: if amplitude == 0.0 { 0.0 } else { b.atan2(a) },
                    }
                })
                .collect())
        })
        .collect()
}

/// Evaluates `Σ_l a_l e^{-σ_l t} cos(ω_l t + φ_l)` for every channel over `n` samples.
pub fn residue_curve(modes: &[Mode], residues: &[Vec<Polar>], fs: f64, n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(residues.len(), n, |c, k| {
        let t = k as f64 / fs;
        modes
            .iter()
            .zip(&residues[c])
            .map(|(m, p)| p.amplitude * (-m.sigma * t).exp() * (m.omega * t + p.phase).cos())
            .sum()
    })
}
