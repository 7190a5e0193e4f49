//! Second-derivative filter: propagates `∂²x/∂θⱼ∂θₖ` and `∂²V/∂θⱼ∂θₖ`
//! alongside the gradient filter and assembles the exact Hessian of the
//! log-likelihood.
//!
//! Pair stacks hold one entry per unordered parameter pair `(j, k)` with
//! `j <= k` (see [`pair_index`]); mixed partials are symmetric, so the
//! stack is read symmetrically. Every product of two first-derivative
//! factors enters an entry as the symmetrized sum
//! `(∂A/∂θⱼ)(∂B/∂θₖ) + (∂A/∂θₖ)(∂B/∂θⱼ)`, which keeps each entry of
//! `∂²V` a symmetric matrix and the stack symmetric in `(j, k)`.
//!
//! Models without second-derivative stacks fall back to central finite
//! differences of the analytic gradient.

use nalgebra::{DMatrix, DVector};

use crate::derivfilter::{
    grad_predict, grad_update, gradient_from_innovations, GradFilterState, GradInnovation,
};
use crate::error::FilterError;
use crate::kalman::{self, HessianMethod, InnovationRecord, LikelihoodReport};
use crate::linalg::symmetrize;
use crate::statespace::{pair_count, pair_index, ModelMatrices, ModelProvider};

/// Gradient-filter state extended with the pair-indexed second
/// derivatives of the state mean and covariance.
#[derive(Clone, Debug)]
pub struct HessFilterState {
    pub grad: GradFilterState,
    pub d2x: Vec<DVector<f64>>,
    pub d2v: Vec<DMatrix<f64>>,
}

impl HessFilterState {
    /// Builds the initial state; absent second-derivative stacks in the
    /// initial condition are treated as zero.
    pub fn from_initial(init: &crate::statespace::InitialCondition) -> Self {
        let grad = GradFilterState::from_initial(init);
        let p = grad.param_dim();
        let m = grad.base.x.len();
        let np = pair_count(p);
        let d2x = init
            .d2x0
            .clone()
            .unwrap_or_else(|| vec![DVector::zeros(m); np]);
        let d2v = init
            .d2v0
            .clone()
            .unwrap_or_else(|| vec![DMatrix::zeros(m, m); np]);
        Self { grad, d2x, d2v }
    }
}

/// Second derivatives of one innovation, pair-indexed.
#[derive(Clone, Debug)]
pub struct HessInnovation {
    pub d2eps: Vec<f64>,
    pub d2r: Vec<f64>,
}

/// One full prediction + update step of the second-derivative filter.
///
/// Returns the advanced state together with the innovation record and
/// its first and second derivatives for this step.
pub fn hess_step(
    hs: &HessFilterState,
    mm: &ModelMatrices,
    y: f64,
) -> Result<(HessFilterState, InnovationRecord, GradInnovation, HessInnovation), FilterError> {
    let d2m = mm.d2.as_ref().ok_or(FilterError::MissingSecondDerivatives)?;
    let p = hs.grad.param_dim();
    let np = pair_count(p);

    // ---- prediction of the second derivatives (uses the previous
    // filtered x, V, dx, dV throughout) ----
    let x = &hs.grad.base.x;
    let v = &hs.grad.base.v;
    let dx = &hs.grad.dx;
    let dv = &hs.grad.dv;
    let ft = mm.f.transpose();
    let gt = mm.g.transpose();
    let fv = &mm.f * v;
    let gq = &mm.g * &mm.q;

    let mut d2x_pred = Vec::with_capacity(np);
    let mut d2v_pred = Vec::with_capacity(np);
    for j in 0..p {
        for k in j..p {
            let jk = pair_index(j, k, p);
            d2x_pred.push(
                &mm.f * &hs.d2x[jk]
                    + &mm.df[j] * &dx[k]
                    + &mm.df[k] * &dx[j]
                    + &d2m.d2f[jk] * x,
            );
            let mut m = &mm.f * &hs.d2v[jk] * &ft
                + &d2m.d2f[jk] * v * &ft
                + &fv * d2m.d2f[jk].transpose()
                + &mm.df[j] * &dv[k] * &ft
                + &mm.df[k] * &dv[j] * &ft
                + &mm.f * &dv[j] * mm.df[k].transpose()
                + &mm.f * &dv[k] * mm.df[j].transpose()
                + &mm.df[j] * v * mm.df[k].transpose()
                + &mm.df[k] * v * mm.df[j].transpose()
                + &mm.g * &d2m.d2q[jk] * &gt
                + &d2m.d2g[jk] * &mm.q * &gt
                + &gq * d2m.d2g[jk].transpose()
                + &mm.dg[j] * &mm.dq[k] * &gt
                + &mm.dg[k] * &mm.dq[j] * &gt
                + &mm.g * &mm.dq[j] * mm.dg[k].transpose()
                + &mm.g * &mm.dq[k] * mm.dg[j].transpose()
                + &mm.dg[j] * &mm.q * mm.dg[k].transpose()
                + &mm.dg[k] * &mm.q * mm.dg[j].transpose();
            symmetrize(&mut m);
            d2v_pred.push(m);
        }
    }

    // ---- first-order prediction and update via the gradient filter ----
    let predicted = grad_predict(&hs.grad, mm);
    let xp = predicted.base.x.clone();
    let vp = predicted.base.v.clone();
    let dxp: Vec<DVector<f64>> = predicted.dx.clone();
    let dvp: Vec<DMatrix<f64>> = predicted.dv.clone();
    let (filtered, rec, grec) = grad_update(&predicted, mm, y)?;
    let r = rec.r;
    let eps = rec.eps;
    let kgain = &rec.gain;

    let vh = &vp * &mm.h; // V Hᵀ (predicted)
    let dvh: Vec<DVector<f64>> = (0..p).map(|j| &dvp[j] * &mm.h).collect();
    let vdh: Vec<DVector<f64>> = (0..p).map(|j| &vp * &mm.dh[j]).collect();

    // ---- second derivatives of the innovation and the update ----
    let mut d2eps = Vec::with_capacity(np);
    let mut d2r = Vec::with_capacity(np);
    let mut d2x_new = Vec::with_capacity(np);
    let mut d2v_new = Vec::with_capacity(np);
    for j in 0..p {
        for k in j..p {
            let jk = pair_index(j, k, p);
            let de2 = -mm.dh[j].dot(&dxp[k])
                - mm.dh[k].dot(&dxp[j])
                - mm.h.dot(&d2x_pred[jk])
                - d2m.d2h[jk].dot(&xp);
            let d2vh = &d2v_pred[jk] * &mm.h;
            let dr2 = mm.dh[j].dot(&dvh[k])
                + mm.dh[k].dot(&dvh[j])
                + mm.h.dot(&d2vh)
                + mm.h.dot(&(&dvp[j] * &mm.dh[k]))
                + mm.h.dot(&(&dvp[k] * &mm.dh[j]))
                + d2m.d2h[jk].dot(&vh)
                + mm.h.dot(&(&vp * &d2m.d2h[jk]))
                + mm.dh[j].dot(&vdh[k])
                + mm.dh[k].dot(&vdh[j])
                + d2m.d2r[jk];

            let d2k = (&d2vh + &dvp[j] * &mm.dh[k] + &dvp[k] * &mm.dh[j] + &vp * &d2m.d2h[jk])
                / r
                - (&dvh[j] + &vdh[j]) * (grec.dr[k] / (r * r))
                - (&dvh[k] + &vdh[k]) * (grec.dr[j] / (r * r))
                + &vh * (2.0 * grec.dr[j] * grec.dr[k] / (r * r * r))
                - &vh * (dr2 / (r * r));

            d2x_new.push(
                &d2x_pred[jk]
                    + &grec.dgain[j] * grec.deps[k]
                    + &grec.dgain[k] * grec.deps[j]
                    + kgain * de2
                    + &d2k * eps,
            );

            // Rows H V, ∂H V, H ∂V and their second-order versions enter
            // through the symmetry of V and its derivative stacks.
            let mut m = &d2v_pred[jk]
                - &d2k * vh.transpose()
                - &grec.dgain[j] * vdh[k].transpose()
                - &grec.dgain[k] * vdh[j].transpose()
                - &grec.dgain[j] * dvh[k].transpose()
                - &grec.dgain[k] * dvh[j].transpose()
                - kgain * (&vp * &d2m.d2h[jk]).transpose()
                - kgain * (&dvp[k] * &mm.dh[j]).transpose()
                - kgain * (&dvp[j] * &mm.dh[k]).transpose()
                - kgain * d2vh.transpose();
            symmetrize(&mut m);
            d2v_new.push(m);
            d2eps.push(de2);
            d2r.push(dr2);
        }
    }

    Ok((
        HessFilterState {
            grad: filtered,
            d2x: d2x_new,
            d2v: d2v_new,
        },
        rec,
        grec,
        HessInnovation { d2eps, d2r },
    ))
}

/// Assembles the Hessian of the plain log-likelihood from recorded
/// innovations and their first and second derivatives. Each `(j, k)`
/// entry accumulates
///
/// ```text
/// −½ Σₙ { ∂²r/r − ∂rⱼ∂rₖ/r² + (2/r)(∂εⱼ∂εₖ + ε ∂²ε)
///         − (2ε/r²)(∂εⱼ∂rₖ + ∂εₖ∂rⱼ) − (ε²/r²) ∂²r + (2ε²/r³) ∂rⱼ∂rₖ }
/// ```
///
/// obtained by differentiating the gradient assembly once more. The
/// result is symmetric by construction of the pair storage.
pub fn hessian_from_innovations(
    recs: &[InnovationRecord],
    grecs: &[GradInnovation],
    hrecs: &[HessInnovation],
    p: usize,
) -> DMatrix<f64> {
    let np = pair_count(p);
    let mut acc = vec![0.0; np];
    for ((rec, grec), hrec) in recs.iter().zip(grecs).zip(hrecs) {
        let r = rec.r;
        let eps = rec.eps;
        for j in 0..p {
            for k in j..p {
                let jk = pair_index(j, k, p);
                let bracket = hrec.d2r[jk] / r - grec.dr[j] * grec.dr[k] / (r * r)
                    + (2.0 / r) * (grec.deps[j] * grec.deps[k] + eps * hrec.d2eps[jk])
                    - (2.0 * eps / (r * r))
                        * (grec.deps[j] * grec.dr[k] + grec.deps[k] * grec.dr[j])
                    - (eps * eps / (r * r)) * hrec.d2r[jk]
                    + (2.0 * eps * eps / (r * r * r)) * grec.dr[j] * grec.dr[k];
                acc[jk] += bracket;
            }
        }
    }
    DMatrix::from_fn(p, p, |j, k| -0.5 * acc[pair_index(j, k, p)])
}

/// Central finite differences of the analytic gradient, used when a
/// model has no second-derivative stacks. Step `1e-4·max(|θⱼ|, 1)`.
pub fn fd_hessian_of_gradient(
    provider: &dyn ModelProvider,
    theta: &[f64],
    ys: &[f64],
) -> Result<DMatrix<f64>, FilterError> {
    let p = theta.len();
    let mut hess = DMatrix::zeros(p, p);
    for j in 0..p {
        let delta = 1e-4 * theta[j].abs().max(1.0);
        let mut plus = theta.to_vec();
        plus[j] += delta;
        let mut minus = theta.to_vec();
        minus[j] -= delta;
        let gp = crate::derivfilter::run_gradient_filter(provider, &plus, ys)?
            .gradient
            .expect("gradient filter always fills the gradient");
        let gm = crate::derivfilter::run_gradient_filter(provider, &minus, ys)?
            .gradient
            .expect("gradient filter always fills the gradient");
        let col = (gp - gm) / (2.0 * delta);
        hess.set_column(j, &col);
    }
    symmetrize(&mut hess);
    Ok(hess)
}

/// Runs the full second-derivative filter and returns the
/// log-likelihood, gradient and Hessian.
///
/// Providers without second-derivative stacks (and concentrated-variance
/// models, whose Hessian recursions are not carried analytically) fall
/// back to finite differences of the analytic gradient; the report's
/// `hessian_method` records which route was taken. The embedded gradient
/// is bit-identical to [`run_gradient_filter`]'s output.
///
/// [`run_gradient_filter`]: crate::derivfilter::run_gradient_filter
pub fn run_hessian_filter(
    provider: &dyn ModelProvider,
    theta: &[f64],
    ys: &[f64],
) -> Result<LikelihoodReport, FilterError> {
    if ys.is_empty() {
        return Err(FilterError::EmptySeries);
    }
    if !provider.has_second_derivatives() || provider.concentrated_variance() {
        let mut report = crate::derivfilter::run_gradient_filter(provider, theta, ys)?;
        report.hessian = Some(fd_hessian_of_gradient(provider, theta, ys)?);
        report.hessian_method = Some(HessianMethod::FdOfGradient);
        return Ok(report);
    }

    let model = provider.eval(theta, true)?;
    let p = model.dims.param_dim;
    let mut hs = HessFilterState::from_initial(&model.init);
    let mut recs = Vec::with_capacity(ys.len());
    let mut grecs = Vec::with_capacity(ys.len());
    let mut hrecs = Vec::with_capacity(ys.len());
    for (n, &y) in ys.iter().enumerate() {
        let (next, rec, grec, hrec) =
            hess_step(&hs, &model.mats, y).map_err(|e| e.at_step(n + 1))?;
        hs = next;
        recs.push(rec);
        grecs.push(grec);
        hrecs.push(hrec);
    }
    let loglik = kalman::loglik_from_innovations(&recs);
    let gradient = gradient_from_innovations(&recs, &grecs);
    let hessian = hessian_from_innovations(&recs, &grecs, &hrecs, p);
    let mut report = LikelihoodReport::value_only(loglik, recs);
    report.gradient = Some(gradient);
    report.hessian = Some(hessian);
    report.hessian_method = Some(HessianMethod::Analytic);
    Ok(report)
}
