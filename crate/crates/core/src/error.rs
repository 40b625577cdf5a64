use thiserror::Error;

use crate::erm::SolverReport;

/// Errors raised while building environments, evaluating models or running experiments.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value is missing, malformed or out of range.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A structural invariant failed; `field` names the offending quantity.
    #[error("{field}: {message}")]
    Invariant { field: String, message: String },

    /// A non-finite value reached a place that requires finite input.
    #[error("numerical blow-up: {0}")]
    NonFinite(String),

    #[error(
        "solver did not converge after {} iterations (gradient norm {:.3e})",
        .0.iterations,
        .0.final_grad_norm
    )]
    NoConvergence(SolverReport),

    #[error("quadrature did not converge: orders {low} and {high} differ by {diff:.3e}")]
    Quadrature { low: usize, high: usize, diff: f64 },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("link not strongly convex on the reachable set (c1 = {0:.3e})")]
    NotStronglyConvex(f64),

    #[error("exploration kernel does not span parameter space (rho_H = {0:.3e})")]
    KernelNotSpanning(f64),

    #[error(
        "exploration schedule sandwich violated at T = {t}: ratio {ratio:.6} outside [{lo}, {hi}]"
    )]
    Sandwich {
        t: u64,
        ratio: f64,
        lo: f64,
        hi: f64,
    },

    #[error("certificate failed: {0}")]
    Certificate(String),

    #[error("config parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invariant(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Invariant {
            field: field.into(),
            message: message.into(),
        }
    }
}
