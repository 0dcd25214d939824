use thiserror::Error;

/// Errors produced by the estimation toolkit.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Malformed or inconsistent input.
    #[error("validation error: {0}")]
    Validation(String),

    /// Argument outside the domain of a mathematical function.
    #[error("domain error: {0}")]
    Domain(String),

    /// A Kalman-type filter lost numerical sanity.
    #[error("filter diverged at step {step}{}: {reason}", node.map(|n| format!(" on node {n}")).unwrap_or_default())]
    Divergence {
        step: usize,
        node: Option<usize>,
        reason: String,
    },

    /// Data cannot support the requested model (e.g. rank-deficient Prony system).
    #[error("degenerate signal: {0}")]
    DegenerateSignal(String),

    /// An iterative solver ran out of iterations.
    #[error("no convergence after {iterations} iterations")]
    NonConvergence { iterations: usize, last: Vec<f64> },

    /// Broken internal bookkeeping. Always a bug.
    #[error("internal invariant violated: {0}")]
    Internal(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn validation(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}
