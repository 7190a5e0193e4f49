//! Error types shared by the filters, model builders and the optimizer.

use thiserror::Error;

/// Errors raised while constructing a model at a given parameter vector.
#[derive(Debug, Clone, Error)]
pub enum ModelError {
    /// Parameter vector length does not match the model's parameter count.
    #[error("parameter vector has length {got}, expected {expected}")]
    BadDimension { expected: usize, got: usize },

    /// AR polynomial has a root inside the unit circle, so the stationary
    /// initial covariance does not exist.
    #[error("AR coefficients are non-stationary (companion spectral radius {radius:.6})")]
    NonStationary { radius: f64 },

    /// The linear system for the autocovariances is numerically singular,
    /// which happens when the AR polynomial is at or beyond the
    /// stationarity boundary.
    #[error("autocovariance linear system is singular")]
    SingularCovarianceSystem,
}

/// Errors raised while running a filter pass.
#[derive(Debug, Clone, Error)]
pub enum FilterError {
    /// The one-step prediction-error variance collapsed to a non-positive
    /// value; the model is degenerate at this parameter point.
    #[error("innovation variance r = {r:.3e} at step {step} is not positive")]
    NonpositiveInnovationVariance { step: usize, r: f64 },

    /// The Hessian filter was asked to run on a model without
    /// second-derivative stacks.
    #[error("model does not carry second-derivative stacks")]
    MissingSecondDerivatives,

    /// The concentrated innovation-variance estimate is not positive
    /// (all prediction errors were exactly zero, or a NaN crept in).
    #[error("concentrated variance estimate {sigma2:.3e} is not positive")]
    DegenerateVariance { sigma2: f64 },

    /// A filter pass was requested on an empty series.
    #[error("series must contain at least one observation")]
    EmptySeries,

    #[error(transparent)]
    Model(#[from] ModelError),
}

impl FilterError {
    /// Attaches the 1-based observation index to an innovation-variance
    /// failure raised inside a single update step.
    pub(crate) fn at_step(self, step: usize) -> Self {
        match self {
            FilterError::NonpositiveInnovationVariance { r, .. } => {
                FilterError::NonpositiveInnovationVariance { step, r }
            }
            other => other,
        }
    }
}

/// Errors raised by the optimizer and the finite-difference oracle.
#[derive(Debug, Error)]
pub enum OptimizeError {
    /// A finite-difference probe point could not be evaluated.
    #[error("finite-difference probe failed at {theta:?}")]
    ProbeFailure {
        theta: Vec<f64>,
        #[source]
        source: FilterError,
    },

    /// The objective could not be evaluated at an optimizer iterate.
    #[error("objective evaluation failed at {theta:?}")]
    EvaluationFailure {
        theta: Vec<f64>,
        #[source]
        source: FilterError,
    },

    /// The objective returned a non-finite value at the starting point.
    #[error("objective is not finite at the starting point ({value})")]
    NonFiniteStart { value: f64 },
}
