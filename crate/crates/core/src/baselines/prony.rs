use log::{debug, warn};
use nalgebra::{Complex, DMatrix, DVector};

use crate::error::{validation, Error, Result};
use crate::signal_model::{MeasurementWindow, Mode};

/// Roots closer than this to the real axis are treated as pure decays.
const REAL_ROOT_TOL: f64 = 1e-9;
/// Singular-value ratio below which the prediction system counts as rank deficient.
const RANK_TOL: f64 = 1e-12;

/// Fitted linear-prediction model of order `2L`.
#[derive(Debug, Clone, PartialEq)]
pub struct PronyModel {
    pub order: usize,
    /// `y[k] = Σ_i coeffs[i] · y[k-1-i]`.
    pub coeffs: Vec<f64>,
    pub poles: Vec<Complex<f64>>,
    pub modes: Vec<Mode>,
}

/// Resolves the prediction order (`2L` unless overridden) and checks the window length.
pub(crate) fn resolve_order(window: &MeasurementWindow, modes: usize, order: Option<usize>) -> Result<usize> {
    if modes == 0 {
        return Err(validation("at least one mode required"));
    }
    let order = order.unwrap_or(2 * modes);
    if order < 2 * modes {
        return Err(validation(format!("model order {order} cannot hold {modes} modes")));
    }
    if window.len() <= 2 * order + 2 {
        return Err(validation(format!(
            "Prony of order {order} needs more than {} samples per channel, got {}",
            2 * order + 2,
            window.len()
        )));
    }
    Ok(order)
}

/// Linear-prediction rows of one channel: `A b ≈ y` with row `k` equal to
/// `[y[k-1], .., y[k-p]]`.
pub(crate) fn prediction_system(samples: &[f64], order: usize) -> (DMatrix<f64>, DVector<f64>) {
    let rows = samples.len() - order;
    let a = DMatrix::from_fn(rows, order, |r, c| samples[r + order - 1 - c]);
    let y = DVector::from_iterator(rows, samples[order..].iter().copied());
    (a, y)
}

pub(crate) fn channel(window: &MeasurementWindow, c: usize) -> Vec<f64> {
    window.samples.row(c).iter().copied().collect()
}

/// Least squares via SVD, refusing rank-deficient systems.
pub(crate) fn solve_least_squares(a: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    let svd = a.clone().svd(true, true);
    let max = svd.singular_values.max();
    let min = svd.singular_values.min();
    if !(max > 0.0) || min / max < RANK_TOL {
        return Err(Error::DegenerateSignal(format!(
            "linear-prediction system is rank deficient (singular values {min:e}..{max:e})"
        )));
    }
    svd.solve(y, 0.0).map_err(|e| Error::Internal(e.to_string()))
}

/// Minimum-norm least squares on the singular values above the rank
/// tolerance; an overmodeled system needs only rank `min_rank`.
pub(crate) fn solve_min_norm(a: &DMatrix<f64>, y: &DVector<f64>, min_rank: usize) -> Result<DVector<f64>> {
    let svd = a.clone().svd(true, true);
    let eps = RANK_TOL * svd.singular_values.max();
    let rank = svd.singular_values.iter().filter(|&&s| s > eps).count();
    if !(eps > 0.0) || rank < min_rank {
        return Err(Error::DegenerateSignal(format!(
            "linear-prediction system has rank {rank}, need {min_rank}"
        )));
    }
    svd.solve(y, eps).map_err(|e| Error::Internal(e.to_string()))
}

/// Roots of `z^p − c₁ z^{p−1} − … − c_p` as eigenvalues of the companion matrix.
pub(crate) fn characteristic_roots(coeffs: &[f64]) -> Vec<Complex<f64>> {
    let p = coeffs.len();
    let mut companion = DMatrix::zeros(p, p);
    for (i, &c) in coeffs.iter().enumerate() {
        companion[(0, i)] = c;
    }
    for i in 1..p {
        companion[(i, i - 1)] = 1.0;
    }
    companion.complex_eigenvalues().iter().copied().collect()
}

/// Maps poles to continuous-time modes, keeping the upper half plane only.
pub(crate) fn poles_to_modes(poles: &[Complex<f64>], fs: f64) -> Vec<Mode> {
    let mut modes = Vec::new();
    for z in poles {
        if z.im.abs() <= REAL_ROOT_TOL {
            debug!("Prony root {z} is real (pure decay); excluded");
            continue;
        }
        if z.im > 0.0 {
            let lambda = z.ln() * fs;
            modes.push(Mode::new(lambda.im, -lambda.re));
        }
    }
    modes.sort_by(|a, b| a.omega.total_cmp(&b.omega));
    modes
}

pub(crate) fn model_from_coeffs(coeffs: Vec<f64>, fs: f64) -> PronyModel {
    let poles = characteristic_roots(&coeffs);
    let modes = poles_to_modes(&poles, fs);
    PronyModel {
        order: coeffs.len(),
        coeffs,
        poles,
        modes,
    }
}

/// Multi-channel Prony fit of order `2L` with shared prediction coefficients (common poles).
pub fn prony_model(window: &MeasurementWindow, modes: usize) -> Result<PronyModel> {
    prony_model_with(window, modes, None)
}

/// Like [`prony_model`] with an optional larger prediction order. The model
/// then keeps every oscillatory pole; see [`dominant_modes`].
pub fn prony_model_with(window: &MeasurementWindow, modes: usize, order: Option<usize>) -> Result<PronyModel> {
    let order = resolve_order(window, modes, order)?;
    let per_channel = window.len() - order;
    let rows = per_channel * window.channels();
    let mut a = DMatrix::zeros(rows, order);
    let mut y = DVector::zeros(rows);
    for c in 0..window.channels() {
        let (ac, yc) = prediction_system(&channel(window, c), order);
        a.rows_mut(c * per_channel, per_channel).copy_from(&ac);
        y.rows_mut(c * per_channel, per_channel).copy_from(&yc);
    }
    let coeffs = if order == 2 * modes {
        solve_least_squares(&a, &y)?
    } else {
        solve_min_norm(&a, &y, 2 * modes)?
    };
    let model = model_from_coeffs(coeffs.iter().copied().collect(), window.fs);
    if model.modes.len() < modes {
        warn!("Prony model of order {order} holds {} oscillatory mode(s), {modes} requested", model.modes.len());
    }
    Ok(model)
}

pub fn prony_fit(window: &MeasurementWindow, modes: usize) -> Result<Vec<Mode>> {
    prony_model(window, modes).map(|m| m.modes)
}

/// Overmodeled fit: order-`order` prediction, then the `modes` strongest modes.
pub fn prony_fit_with(window: &MeasurementWindow, modes: usize, order: Option<usize>) -> Result<Vec<Mode>> {
    let model = prony_model_with(window, modes, order)?;
    Ok(dominant_modes(window, &model.modes, modes))
}

/// Picks the `keep` candidates carrying the most signal energy over the
/// window (joint least-squares residues, summed over channels), sorted by ω.
pub fn dominant_modes(window: &MeasurementWindow, candidates: &[Mode], keep: usize) -> Vec<Mode> {
    if candidates.len() <= keep {
        return candidates.to_vec();
    }
    let n = window.len();
    let basis = DMatrix::from_fn(n, 2 * candidates.len(), |k, col| {
        let mode = candidates[col / 2];
        let t = k as f64 / window.fs;
        let env = (-mode.sigma * t).exp();
        if col % 2 == 0 {
            env * (mode.omega * t).cos()
        } else {
            -env * (mode.omega * t).sin()
        }
    });
    let svd = basis.clone().svd(true, true);
    let eps = RANK_TOL * svd.singular_values.max();
    let mut energy = vec![0.0; candidates.len()];
    for c in 0..window.channels() {
        let y = DVector::from_iterator(n, window.samples.row(c).iter().copied());
        let Ok(coef) = svd.solve(&y, eps) else { continue };
        for (l, e) in energy.iter_mut().enumerate() {
            let part = basis.columns(2 * l, 2) * coef.rows(2 * l, 2);
            *e += part.norm_squared();
        }
    }
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| energy[b].total_cmp(&energy[a]).then(a.cmp(&b)));
    let mut picked: Vec<Mode> = order[..keep].iter().map(|&i| candidates[i]).collect();
    picked.sort_by(|a, b| a.omega.total_cmp(&b.omega));
    picked
}
