//! Kalman filter and the Gaussian log-likelihood through the
//! prediction-error decomposition.

use nalgebra::{DMatrix, DVector};

use crate::error::FilterError;
use crate::linalg::{symmetrize, Kahan};
use crate::statespace::{ModelMatrices, ModelProvider};

/// Innovation variances at or below this floor abort the run instead of
/// letting NaNs propagate.
pub const INNOVATION_VARIANCE_FLOOR: f64 = 1e-300;

/// Filtered (or, between `predict` and `update`, predicted) state mean
/// and covariance.
#[derive(Clone, Debug)]
pub struct FilterState {
    pub x: DVector<f64>,
    pub v: DMatrix<f64>,
}

/// Per-step prediction error, its variance and the Kalman gain.
#[derive(Clone, Debug)]
pub struct InnovationRecord {
    pub eps: f64,
    pub r: f64,
    pub gain: DVector<f64>,
}

/// How the Hessian in a [`LikelihoodReport`] was obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HessianMethod {
    /// Exact second-derivative filter.
    Analytic,
    /// Central finite differences of the analytic gradient.
    FdOfGradient,
}

/// Output of a filter pass: the log-likelihood, per-step diagnostics and,
/// depending on the driver, the gradient and Hessian.
#[derive(Clone, Debug)]
pub struct LikelihoodReport {
    pub loglik: f64,
    pub n_obs: usize,
    pub innovations: Vec<InnovationRecord>,
    pub gradient: Option<DVector<f64>>,
    pub hessian: Option<DMatrix<f64>>,
    pub hessian_method: Option<HessianMethod>,
    /// Concentrated innovation-variance estimate; present only for
    /// models with `concentrated_variance`.
    pub sigma2_hat: Option<f64>,
}

impl LikelihoodReport {
    pub(crate) fn value_only(loglik: f64, innovations: Vec<InnovationRecord>) -> Self {
        Self {
            loglik,
            n_obs: innovations.len(),
            innovations,
            gradient: None,
            hessian: None,
            hessian_method: None,
            sigma2_hat: None,
        }
    }
}

/// One-step-ahead prediction: `x ← F x`, `V ← F V Fᵀ + G Q Gᵀ`,
/// with `V` symmetrized afterwards.
pub fn predict(state: &FilterState, mm: &ModelMatrices) -> FilterState {
    let x = &mm.f * &state.x;
    let mut v = &mm.f * &state.v * mm.f.transpose() + &mm.g * &mm.q * mm.g.transpose();
    symmetrize(&mut v);
    FilterState { x, v }
}

/// Measurement update of a predicted state. Returns the filtered state
/// and the innovation record `(ε, r, K)`.
pub fn update(
    state: &FilterState,
    mm: &ModelMatrices,
    y: f64,
) -> Result<(FilterState, InnovationRecord), FilterError> {
    let vh = &state.v * &mm.h; // V Hᵀ
    let r = mm.h.dot(&vh) + mm.r;
    if !(r > INNOVATION_VARIANCE_FLOOR) {
        return Err(FilterError::NonpositiveInnovationVariance { step: 0, r });
    }
    let eps = y - mm.h.dot(&state.x);
    let gain = &vh / r;
    let x = &state.x + &gain * eps;
    // V ← (I − K H) V = V − K (H V); H V = (V Hᵀ)ᵀ because V is symmetric.
    let mut v = &state.v - &gain * vh.transpose();
    symmetrize(&mut v);
    Ok((FilterState { x, v }, InnovationRecord { eps, r, gain }))
}

/// Gaussian log-likelihood from recorded innovations:
/// `−½ { N log 2π + Σ log rₙ + Σ εₙ²/rₙ }`, both sums compensated.
pub fn loglik_from_innovations(recs: &[InnovationRecord]) -> f64 {
    let mut log_sum = Kahan::default();
    let mut quad_sum = Kahan::default();
    for rec in recs {
        log_sum.add(rec.r.ln());
        quad_sum.add(rec.eps * rec.eps / rec.r);
    }
    let n = recs.len() as f64;
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    -0.5 * (n * ln_2pi + log_sum.value() + quad_sum.value())
}

/// Runs the filter over `ys` and accumulates the log-likelihood.
///
/// For models with a concentrated innovation variance the ARMA form of
/// the likelihood is used and `sigma2_hat` is filled in.
pub fn run_filter(
    provider: &dyn ModelProvider,
    theta: &[f64],
    ys: &[f64],
) -> Result<LikelihoodReport, FilterError> {
    if ys.is_empty() {
        return Err(FilterError::EmptySeries);
    }
    let model = provider.eval(theta, false)?;
    let mut state = FilterState {
        x: model.init.x0.clone(),
        v: model.init.v0.clone(),
    };
    let mut recs = Vec::with_capacity(ys.len());
    for (n, &y) in ys.iter().enumerate() {
        let predicted = predict(&state, &model.mats);
        let (filtered, rec) =
            update(&predicted, &model.mats, y).map_err(|e| e.at_step(n + 1))?;
        state = filtered;
        recs.push(rec);
    }
    if provider.concentrated_variance() {
        let (sigma2_hat, loglik) = crate::arma::concentrated_loglik(&recs)?;
        let mut report = LikelihoodReport::value_only(loglik, recs);
        report.sigma2_hat = Some(sigma2_hat);
        Ok(report)
    } else {
        let loglik = loglik_from_innovations(&recs);
        Ok(LikelihoodReport::value_only(loglik, recs))
    }
}
