use thiserror::Error;

/// Errors raised by the numerical kernels.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("frenet frame undefined: |tau'| < 1e-12 at node {node} (s = {s})")]
    DegenerateFrenet { node: usize, s: f64 },
    #[error("non-positive tube jacobian det = {det:e} at s = {s}, xi = {xi}, zeta = {zeta}, h = {h}")]
    NonPositiveJacobian { s: f64, xi: f64, zeta: f64, h: f64, det: f64 },
    #[error("conjugate gradients did not converge: relative residual {residual:e} after {iterations} iterations")]
    SolverNonConvergence { residual: f64, iterations: usize, history: Vec<f64> },
    #[error("load not equilibrated: pairing {pairing:e} with kernel direction {direction}")]
    NotEquilibrated { direction: usize, pairing: f64 },
    #[error("line search failed at newton iteration {iteration} (gradient norm {gradient_norm:e})")]
    LineSearchFailure { iteration: usize, gradient_norm: f64, last_iterate: Vec<f64> },
    #[error("mesh error: {0}")]
    Mesh(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidInput(msg.into()))
}
