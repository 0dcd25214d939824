//! Prony-family comparison baselines.

mod admm;
mod prony;
mod residue;

pub use admm::{admm_prony, AdmmOutcome, AdmmSettings, AdmmState, DEFAULT_MAX_ITERS, DEFAULT_RHO, DEFAULT_TOL};
pub use prony::{dominant_modes, prony_fit, prony_fit_with, prony_model, prony_model_with, PronyModel};
pub use residue::{residue_curve, residue_fit};
