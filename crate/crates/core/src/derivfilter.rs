//! Gradient filter: propagates the parameter derivatives of the state
//! mean and covariance in parallel with the Kalman filter, so the exact
//! gradient of the log-likelihood comes out of one filtering pass.

use nalgebra::{DMatrix, DVector};

use crate::error::FilterError;
use crate::kalman::{self, FilterState, InnovationRecord, LikelihoodReport};
use crate::linalg::{symmetrize, Kahan};
use crate::statespace::{InitialCondition, ModelMatrices, ModelProvider};

/// Kalman filter state extended with the per-parameter derivative stacks
/// `∂x/∂θⱼ` and `∂V/∂θⱼ`.
#[derive(Clone, Debug)]
pub struct GradFilterState {
    pub base: FilterState,
    pub dx: Vec<DVector<f64>>,
    pub dv: Vec<DMatrix<f64>>,
}

impl GradFilterState {
    pub fn from_initial(init: &InitialCondition) -> Self {
        Self {
            base: FilterState {
                x: init.x0.clone(),
                v: init.v0.clone(),
            },
            dx: init.dx0.clone(),
            dv: init.dv0.clone(),
        }
    }

    pub fn param_dim(&self) -> usize {
        self.dx.len()
    }
}

/// Derivatives of one innovation: `∂ε/∂θ`, `∂r/∂θ` and `∂K/∂θ`.
#[derive(Clone, Debug)]
pub struct GradInnovation {
    pub deps: Vec<f64>,
    pub dr: Vec<f64>,
    pub dgain: Vec<DVector<f64>>,
}

/// Prediction step for the derivative stacks, followed by the base
/// prediction. For each parameter j:
///
/// ```text
/// ∂x ← F ∂x + ∂F x
/// ∂V ← F ∂V Fᵀ + ∂F V Fᵀ + F V ∂Fᵀ + G ∂Q Gᵀ + ∂G Q Gᵀ + G Q ∂Gᵀ
/// ```
///
/// where `x` and `V` are the filtered quantities from the previous step.
pub fn grad_predict(gs: &GradFilterState, mm: &ModelMatrices) -> GradFilterState {
    let p = gs.param_dim();
    let x = &gs.base.x;
    let v = &gs.base.v;
    let ft = mm.f.transpose();
    let gt = mm.g.transpose();
    let fv = &mm.f * v;
    let qgt = &mm.q * &gt;
    let gq = &mm.g * &mm.q;

    let mut dx = Vec::with_capacity(p);
    let mut dv = Vec::with_capacity(p);
    for j in 0..p {
        dx.push(&mm.f * &gs.dx[j] + &mm.df[j] * x);
        let mut m = &mm.f * &gs.dv[j] * &ft
            + &mm.df[j] * v * &ft
            + &fv * mm.df[j].transpose()
            + &mm.g * &mm.dq[j] * &gt
            + &mm.dg[j] * &qgt
            + &gq * mm.dg[j].transpose();
        symmetrize(&mut m);
        dv.push(m);
    }
    let base = kalman::predict(&gs.base, mm);
    GradFilterState { base, dx, dv }
}

/// Measurement update for the derivative stacks. Consumes a *predicted*
/// state and returns the filtered state plus the innovation and its
/// derivatives:
///
/// ```text
/// ∂ε = −H ∂x − ∂H x
/// ∂r = H ∂V Hᵀ + ∂H V Hᵀ + H V ∂Hᵀ + ∂R
/// ∂K = (∂V Hᵀ + V ∂Hᵀ)/r − V Hᵀ ∂r/r²
/// ∂x ← ∂x + K ∂ε + ∂K ε
/// ∂V ← ∂V − ∂K H V − K ∂H V − K H ∂V
/// ```
pub fn grad_update(
    gs: &GradFilterState,
    mm: &ModelMatrices,
    y: f64,
) -> Result<(GradFilterState, InnovationRecord, GradInnovation), FilterError> {
    let p = gs.param_dim();
    let x = &gs.base.x;
    let v = &gs.base.v;
    let (new_base, rec) = kalman::update(&gs.base, mm, y)?;
    let r = rec.r;
    let eps = rec.eps;
    let k = &rec.gain;
    let vh = v * &mm.h; // V Hᵀ

    let mut deps = Vec::with_capacity(p);
    let mut dr = Vec::with_capacity(p);
    let mut dgain = Vec::with_capacity(p);
    let mut dx = Vec::with_capacity(p);
    let mut dv = Vec::with_capacity(p);
    for j in 0..p {
        let de = -mm.h.dot(&gs.dx[j]) - mm.dh[j].dot(x);
        let dvh = &gs.dv[j] * &mm.h; // ∂V Hᵀ
        let vdh = v * &mm.dh[j]; // V ∂Hᵀ
        let drj = mm.h.dot(&dvh) + mm.dh[j].dot(&vh) + mm.h.dot(&vdh) + mm.dr[j];
        let dk = (&dvh + &vdh) / r - &vh * (drj / (r * r));
        dx.push(&gs.dx[j] + k * de + &dk * eps);
        // H V, ∂H V and H ∂V enter as rows; V and ∂V are symmetric.
        let mut m = &gs.dv[j]
            - &dk * vh.transpose()
            - k * vdh.transpose()
            - k * dvh.transpose();
        symmetrize(&mut m);
        dv.push(m);
        deps.push(de);
        dr.push(drj);
        dgain.push(dk);
    }
    Ok((
        GradFilterState {
            base: new_base,
            dx,
            dv,
        },
        rec,
        GradInnovation { deps, dr, dgain },
    ))
}

/// The three per-parameter sums every gradient assembly is built from:
/// `S1ⱼ = Σ ∂rⱼ/r`, `S2ⱼ = Σ (ε/r) ∂εⱼ`, `S3ⱼ = Σ (ε²/r²) ∂rⱼ`.
pub(crate) fn grad_sums(
    recs: &[InnovationRecord],
    grecs: &[GradInnovation],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let p = grecs.first().map_or(0, |g| g.deps.len());
    let mut s1 = vec![Kahan::default(); p];
    let mut s2 = vec![Kahan::default(); p];
    let mut s3 = vec![Kahan::default(); p];
    for (rec, grec) in recs.iter().zip(grecs) {
        let w = rec.eps / rec.r;
        let w2 = w * w;
        for j in 0..p {
            s1[j].add(grec.dr[j] / rec.r);
            s2[j].add(w * grec.deps[j]);
            s3[j].add(w2 * grec.dr[j]);
        }
    }
    (
        s1.iter().map(Kahan::value).collect(),
        s2.iter().map(Kahan::value).collect(),
        s3.iter().map(Kahan::value).collect(),
    )
}

/// Gradient of the plain (non-concentrated) log-likelihood:
/// `∂ℓ/∂θⱼ = −½ Σₙ { ∂rⱼ/r + 2(ε/r)∂εⱼ − (ε²/r²)∂rⱼ }`.
pub fn gradient_from_innovations(
    recs: &[InnovationRecord],
    grecs: &[GradInnovation],
) -> DVector<f64> {
    let (s1, s2, s3) = grad_sums(recs, grecs);
    DVector::from_fn(s1.len(), |j, _| -0.5 * (s1[j] + 2.0 * s2[j] - s3[j]))
}

/// Runs the gradient filter over `ys`, producing the log-likelihood and
/// its exact gradient in a single pass.
///
/// The log-likelihood is bit-identical to [`kalman::run_filter`]: the
/// base filter inside this pass performs exactly the same arithmetic.
pub fn run_gradient_filter(
    provider: &dyn ModelProvider,
    theta: &[f64],
    ys: &[f64],
) -> Result<LikelihoodReport, FilterError> {
    if ys.is_empty() {
        return Err(FilterError::EmptySeries);
    }
    let model = provider.eval(theta, false)?;
    let mut gs = GradFilterState::from_initial(&model.init);
    let mut recs = Vec::with_capacity(ys.len());
    let mut grecs = Vec::with_capacity(ys.len());
    for (n, &y) in ys.iter().enumerate() {
        let predicted = grad_predict(&gs, &model.mats);
        let (filtered, rec, grec) =
            grad_update(&predicted, &model.mats, y).map_err(|e| e.at_step(n + 1))?;
        gs = filtered;
        recs.push(rec);
        grecs.push(grec);
    }
    if provider.concentrated_variance() {
        let (sigma2_hat, loglik) = crate::arma::concentrated_loglik(&recs)?;
        let gradient = crate::arma::concentrated_gradient(&recs, &grecs, sigma2_hat);
        let mut report = LikelihoodReport::value_only(loglik, recs);
        report.sigma2_hat = Some(sigma2_hat);
        report.gradient = Some(gradient);
        Ok(report)
    } else {
        let loglik = kalman::loglik_from_innovations(&recs);
        let gradient = gradient_from_innovations(&recs, &grecs);
        let mut report = LikelihoodReport::value_only(loglik, recs);
        report.gradient = Some(gradient);
        Ok(report)
    }
}
