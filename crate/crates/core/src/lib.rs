//! Maximum-likelihood estimation of linear Gaussian state-space models.
//!
//! The log-likelihood of a state-space model is evaluated by the Kalman
//! filter through the prediction-error decomposition. This crate extends
//! that recursion with two parallel filters:
//!
//! * a **gradient filter** ([`derivfilter`]) that propagates the
//!   derivatives of the state mean and covariance with respect to the
//!   model parameters, so the exact score vector comes out of a single
//!   filtering pass instead of `2p` numerical-difference passes;
//! * a **Hessian filter** ([`hessfilter`]) that propagates the second
//!   derivatives and assembles the exact Hessian of the log-likelihood.
//!
//! Built-in model families:
//!
//! * [`seasonal`] — trend + seasonal (+ optional stationary AR component)
//!   decomposition models with log-variance and PARCOR parameter
//!   transformations;
//! * [`arma`] — ARMA(m, l) models in state-space form with the innovation
//!   variance concentrated out of the likelihood and the stationary
//!   initial covariance (and its parameter derivatives) computed exactly.
//!
//! [`optimize`] provides a BFGS maximizer driven by the analytic gradient
//! and a central finite-difference oracle used for verification, and
//! [`simulate`] draws synthetic series from any model.

pub mod arma;
pub mod derivfilter;
pub mod error;
pub mod hessfilter;
pub mod kalman;
pub mod linalg;
pub mod optimize;
pub mod seasonal;
pub mod simulate;
pub mod statespace;

pub use error::{FilterError, ModelError, OptimizeError};
pub use kalman::{run_filter, FilterState, InnovationRecord, LikelihoodReport};
pub use statespace::{
    validate_model, InitialCondition, Model, ModelDims, ModelMatrices, ModelProvider,
};
