//! Coordinator-based consensus ADMM on the Prony prediction coefficients.
//!
//! Each node solves a ridge-regularized local least-squares problem against
//! the broadcast average; the coordinator averages and broadcasts back.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use super::prony::{channel, dominant_modes, model_from_coeffs, prediction_system, resolve_order, PronyModel};
use crate::error::{validation, Error, Result};
use crate::signal_model::{MeasurementWindow, Mode};

pub const DEFAULT_RHO: f64 = 0.01;
pub const DEFAULT_TOL: f64 = 0.01;
pub const DEFAULT_MAX_ITERS: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdmmSettings {
    /// Weight of the tracking error against the broadcast average.
    pub rho: f64,
    /// Infinity-norm threshold on the change of the average.
    pub tol: f64,
    pub max_iters: usize,
    /// Prediction order; `None` means `2L`.
    #[serde(default)]
    pub order: Option<usize>,
}

impl Default for AdmmSettings {
    fn default() -> Self {
        Self {
            rho: DEFAULT_RHO,
            tol: DEFAULT_TOL,
            max_iters: DEFAULT_MAX_ITERS,
            order: None,
        }
    }
}

/// Iterates of the consensus problem.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmmState {
    pub local: Vec<DVector<f64>>,
    pub duals: Vec<DVector<f64>>,
    pub average: DVector<f64>,
    pub rho: f64,
    pub tol: f64,
}

impl AdmmState {
    fn new(nodes: usize, order: usize, rho: f64, tol: f64) -> Self {
        Self {
            local: vec![DVector::zeros(order); nodes],
            duals: vec![DVector::zeros(order); nodes],
            average: DVector::zeros(order),
            rho,
            tol,
        }
    }

    /// `max_m ‖b_m − z̄‖∞`.
    pub fn primal_residual(&self) -> f64 {
        self.local.iter().map(|b| (b - &self.average).amax()).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone)]
pub struct AdmmOutcome {
    pub modes: Vec<Mode>,
    pub iterations: usize,
    pub model: PronyModel,
    pub state: AdmmState,
}

struct LocalProblem {
    /// `2AᵀA + ρI`.
    normal: Cholesky<f64, Dyn>,
    /// `2Aᵀy`.
    rhs: DVector<f64>,
}

pub fn admm_prony(window: &MeasurementWindow, modes: usize, settings: &AdmmSettings) -> Result<AdmmOutcome> {
    let order = resolve_order(window, modes, settings.order)?;
    if !(settings.rho.is_finite() && settings.rho > 0.0) {
        return Err(validation("rho must be positive"));
    }
    if !(settings.tol.is_finite() && settings.tol > 0.0) {
        return Err(validation("tolerance must be positive"));
    }
    let problems = (0..window.channels())
        .map(|c| {
            let (a, y) = prediction_system(&channel(window, c), order);
            let normal = a.transpose() * &a * 2.0 + DMatrix::identity(order, order) * settings.rho;
            let normal = normal
                .cholesky()
                .ok_or_else(|| Error::DegenerateSignal(format!("channel {c}: local normal equations singular")))?;
            Ok(LocalProblem {
                normal,
                rhs: a.transpose() * y * 2.0,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let nodes = problems.len();
    let mut state = AdmmState::new(nodes, order, settings.rho, settings.tol);
    for iter in 1..=settings.max_iters {
        for (m, prob) in problems.iter().enumerate() {
            let target = &state.average - &state.duals[m];
            state.local[m] = prob.normal.solve(&(&prob.rhs + target * settings.rho));
        }
        let mut next = DVector::zeros(order);
        for (b, u) in state.local.iter().zip(&state.duals) {
            next += b + u;
        }
        next /= nodes as f64;
        for (b, u) in state.local.iter().zip(state.duals.iter_mut()) {
            *u += b - &next;
        }
        let change = (&next - &state.average).amax();
        state.average = next;
        if !change.is_finite() {
            return Err(Error::NonConvergence {
                iterations: iter,
                last: state.average.iter().copied().collect(),
            });
        }
        if change < settings.tol {
            let model = model_from_coeffs(state.average.iter().copied().collect(), window.fs);
            return Ok(AdmmOutcome {
                modes: dominant_modes(window, &model.modes, modes),
                iterations: iter,
                model,
                state,
            });
        }
    }
    Err(Error::NonConvergence {
        iterations: settings.max_iters,
        last: state.average.iter().copied().collect(),
    })
}
