//! ARMA(m, l) models in state-space form with the innovation variance
//! concentrated out of the likelihood.
//!
//! The state dimension is `k = max(m, l+1)`, `F` is the companion matrix
//! of the AR coefficients, `G = (1, −b₁, …, −b_{k−1})ᵀ` and `H = e₁`.
//! There is no observation noise. The filter always runs with unit
//! innovation variance; its maximizer `σ̂² = (1/N) Σ εₙ²/rₙ` is recovered
//! in closed form, which removes σ² from the optimization.
//!
//! The stationary initial covariance `V₀` and its derivatives with
//! respect to the AR and MA coefficients are computed exactly from the
//! impulse-response and autocovariance sequences; the autocovariances
//! and their derivatives solve small linear systems that share one
//! coefficient matrix.

use nalgebra::{DMatrix, DVector};

use crate::derivfilter::{grad_sums, GradInnovation};
use crate::error::{FilterError, ModelError};
use crate::kalman::InnovationRecord;
use crate::linalg::{companion_spectral_radius, max_abs, Kahan};
use crate::seasonal::ParcorChain;
use crate::statespace::{InitialCondition, Model, ModelDims, ModelMatrices, ModelProvider};

/// How the optimizer coordinates map to ARMA coefficients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Parameterization {
    /// θ holds the coefficients `(a₁…aₘ, b₁…bₗ)` directly. Building a
    /// model fails for non-stationary AR coefficients.
    Raw,
    /// θ is mapped through PARCOR transforms on both the AR and MA
    /// sides, so every real vector yields a stationary and invertible
    /// model.
    Transformed,
}

/// Order and parameterization of an ARMA model.
#[derive(Clone, Copy, Debug)]
pub struct ArmaSpec {
    pub ar_order: usize,
    pub ma_order: usize,
    /// Bound `C` on the partial autocorrelations in transformed
    /// coordinates.
    pub parcor_bound: f64,
    pub parameterization: Parameterization,
}

impl ArmaSpec {
    pub fn new(ar_order: usize, ma_order: usize) -> Self {
        assert!(
            ar_order + ma_order >= 1,
            "an ARMA model needs at least one coefficient"
        );
        Self {
            ar_order,
            ma_order,
            parcor_bound: 0.99,
            parameterization: Parameterization::Transformed,
        }
    }

    pub fn raw(ar_order: usize, ma_order: usize) -> Self {
        Self {
            parameterization: Parameterization::Raw,
            ..Self::new(ar_order, ma_order)
        }
    }

    /// State dimension `k = max(m, l+1)`.
    pub fn state_dim(&self) -> usize {
        self.ar_order.max(self.ma_order + 1)
    }

    /// σ² is concentrated out, so only the coefficients remain.
    pub fn param_dim(&self) -> usize {
        self.ar_order + self.ma_order
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims::new(self.state_dim(), 1, self.param_dim())
    }
}

/// ARMA coefficients in structural coordinates.
#[derive(Clone, Debug)]
pub struct ArmaCoefficients {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub sigma2: f64,
}

/// Impulse response `g₀…g_upto` of the ARMA transfer function:
/// `g₀ = 1`, `gᵢ = Σⱼ aⱼ g_{i−j} − bᵢ` with coefficients beyond their
/// order read as zero.
pub fn impulse_response(a: &[f64], b: &[f64], upto: usize) -> Vec<f64> {
    let mut g = Vec::with_capacity(upto + 1);
    g.push(1.0);
    for i in 1..=upto {
        let mut acc = if i <= b.len() { -b[i - 1] } else { 0.0 };
        for (j, &aj) in a.iter().enumerate().take(i) {
            acc += aj * g[i - 1 - j];
        }
        g.push(acc);
    }
    g
}

/// Derivatives of the impulse response with respect to each AR and MA
/// coefficient: `out.0[p][i] = ∂gᵢ/∂a_{p+1}`, `out.1[p][i] = ∂gᵢ/∂b_{p+1}`.
fn impulse_response_derivs(a: &[f64], b: &[f64], upto: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let g = impulse_response(a, b, upto);
    let mut dga = vec![vec![0.0; upto + 1]; a.len()];
    let mut dgb = vec![vec![0.0; upto + 1]; b.len()];
    for i in 1..=upto {
        for p in 0..a.len() {
            let mut acc = if i > p { g[i - 1 - p] } else { 0.0 }; // g_{i−p} with p 1-based
            for (j, &aj) in a.iter().enumerate().take(i) {
                acc += aj * dga[p][i - 1 - j];
            }
            dga[p][i] = acc;
        }
        for p in 0..b.len() {
            let mut acc = if i == p + 1 { -1.0 } else { 0.0 };
            for (j, &aj) in a.iter().enumerate().take(i) {
                acc += aj * dgb[p][i - 1 - j];
            }
            dgb[p][i] = acc;
        }
    }
    (dga, dgb)
}

/// Coefficient matrix of the linear system satisfied by `C₀…C_kdim` (and
/// by every derivative sequence `∂C/∂θ`, which share it).
fn autocov_matrix(a: &[f64], kdim: usize) -> DMatrix<f64> {
    let n = kdim + 1;
    let mut amat = DMatrix::identity(n, n);
    for kk in 0..n {
        for (i, &ai) in a.iter().enumerate() {
            let idx = (kk as isize - (i + 1) as isize).unsigned_abs();
            if idx < n {
                amat[(kk, idx)] -= ai;
            }
        }
    }
    amat
}

fn solve_cov(
    lu: &nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    rhs: DVector<f64>,
) -> Result<Vec<f64>, ModelError> {
    lu.solve(&rhs)
        .map(|v| v.iter().copied().collect())
        .ok_or(ModelError::SingularCovarianceSystem)
}

/// Autocovariances `C₀…C_upto` of a stationary ARMA process.
///
/// `C₀…C_k` (with `k = max(m, l+1)`) solve a `(k+1)`-dimensional linear
/// system built from the Yule-Walker-type equations
/// `C₀ = Σ aᵢ Cᵢ + σ²(1 − Σ bᵢ gᵢ)` and
/// `Cₖ = Σ aᵢ C_{k−i} − σ² Σ_{i≥k} bᵢ g_{i−k}`; higher lags extend by
/// the same recursion.
pub fn autocovariance(a: &[f64], b: &[f64], sigma2: f64, upto: usize) -> Result<Vec<f64>, ModelError> {
    let m = a.len();
    let l = b.len();
    let kdim = m.max(l + 1);
    let g = impulse_response(a, b, l);
    let mut rhs = DVector::zeros(kdim + 1);
    rhs[0] = sigma2 * (1.0 - (1..=l).map(|i| b[i - 1] * g[i]).sum::<f64>());
    for kk in 1..=kdim {
        rhs[kk] = -sigma2 * (kk..=l).map(|i| b[i - 1] * g[i - kk]).sum::<f64>();
    }
    let lu = autocov_matrix(a, kdim).lu();
    let mut c = solve_cov(&lu, rhs)?;
    for n in (kdim + 1)..=upto {
        let mut acc = 0.0;
        for (i, &ai) in a.iter().enumerate() {
            acc += ai * c[n - 1 - i];
        }
        if n <= l {
            acc -= sigma2 * (n..=l).map(|i| b[i - 1] * g[i - n]).sum::<f64>();
        }
        c.push(acc);
    }
    c.truncate(upto + 1);
    Ok(c)
}

/// Stationary initial state covariance and autocovariance/impulse
/// sequences, with the derivative stacks of `V₀`.
#[derive(Clone, Debug)]
pub struct StationaryInit {
    /// `g₀…g_k`.
    pub g: Vec<f64>,
    /// `C₀…C_k`.
    pub cov: Vec<f64>,
    pub v0: DMatrix<f64>,
    /// `∂V₀/∂aₚ`, one symmetric matrix per AR coefficient.
    pub dv0_da: Vec<DMatrix<f64>>,
    /// `∂V₀/∂bₚ`, one per MA coefficient.
    pub dv0_db: Vec<DMatrix<f64>>,
}

/// Assembles `V₀` from the impulse response and autocovariances.
/// `gseq` must reach index `l`, `cseq` index `kdim`. All indices below
/// are 1-based to follow the structure of the state vector
/// `(yₙ, ỹ_{n+1|n−1}, …)`.
fn build_v0(
    a: &[f64],
    b: &[f64],
    sigma2: f64,
    gseq: &[f64],
    cseq: &[f64],
    kdim: usize,
) -> DMatrix<f64> {
    let m = a.len() as isize;
    let l = b.len() as isize;
    let ga = |i: isize| -> f64 {
        if i < 0 {
            0.0
        } else {
            gseq[i as usize]
        }
    };
    let cv = |i: isize| -> f64 { cseq[i.unsigned_abs()] };
    let av = |i: isize| -> f64 { a[(i - 1) as usize] };
    let bv = |i: isize| -> f64 {
        if i < 1 || i > l {
            0.0
        } else {
            b[(i - 1) as usize]
        }
    };

    let mut v = DMatrix::zeros(kdim, kdim);
    v[(0, 0)] = cseq[0];
    for i in 2..=(kdim as isize) {
        let mut acc = 0.0;
        for j in i..=m {
            acc += av(j) * cv(j + 1 - i);
        }
        for j in (i - 1)..=l {
            acc -= sigma2 * bv(j) * ga(j + 1 - i);
        }
        v[(0, (i - 1) as usize)] = acc;
        v[((i - 1) as usize, 0)] = acc;
    }
    for i in 2..=(kdim as isize) {
        for j in i..=(kdim as isize) {
            let mut acc = 0.0;
            for p in i..=m {
                for q in j..=m {
                    acc += av(p) * av(q) * cv(q - j - p + i);
                }
            }
            for p in i..=m {
                for q in (j - 1)..=l {
                    acc -= sigma2 * av(p) * bv(q) * ga(q - j - p + i);
                }
            }
            for p in (i - 1)..=l {
                for q in j..=m {
                    acc -= sigma2 * bv(p) * av(q) * ga(p - i - q + j);
                }
            }
            for p in (i - 1)..=l {
                acc += sigma2 * bv(p) * bv(p + j - i);
            }
            v[((i - 1) as usize, (j - 1) as usize)] = acc;
            v[((j - 1) as usize, (i - 1) as usize)] = acc;
        }
    }
    v
}

/// Stationary initial covariance `V₀` of the state vector.
pub fn initial_covariance(a: &[f64], b: &[f64], sigma2: f64) -> Result<DMatrix<f64>, ModelError> {
    let kdim = a.len().max(b.len() + 1);
    let g = impulse_response(a, b, b.len().max(kdim));
    let c = autocovariance(a, b, sigma2, kdim)?;
    Ok(build_v0(a, b, sigma2, &g, &c, kdim))
}

/// Exact derivative stacks `∂V₀/∂aₚ` and `∂V₀/∂bₚ`.
///
/// The derivative autocovariances solve linear systems with the same
/// coefficient matrix as [`autocovariance`]; the `V₀` entry formulas are
/// then differentiated term by term, with every sum gated to the index
/// range in which the differentiated coefficient actually appears.
pub fn initial_covariance_derivatives(
    a: &[f64],
    b: &[f64],
    sigma2: f64,
) -> Result<(Vec<DMatrix<f64>>, Vec<DMatrix<f64>>), ModelError> {
    let init = stationary_init(a, b, sigma2)?;
    Ok((init.dv0_da, init.dv0_db))
}

/// Computes the impulse response, autocovariances, `V₀` and all of the
/// derivative stacks in one pass (the linear systems share one LU
/// factorization).
pub fn stationary_init(a: &[f64], b: &[f64], sigma2: f64) -> Result<StationaryInit, ModelError> {
    let m = a.len();
    let l = b.len();
    let kdim = m.max(l + 1);
    let gmax = l.max(kdim);
    let gseq = impulse_response(a, b, gmax);
    let (dga, dgb) = impulse_response_derivs(a, b, l.max(1));
    let lu = autocov_matrix(a, kdim).lu();

    // C and its derivative sequences, all length kdim+1.
    let mut rhs = DVector::zeros(kdim + 1);
    rhs[0] = sigma2 * (1.0 - (1..=l).map(|i| b[i - 1] * gseq[i]).sum::<f64>());
    for kk in 1..=kdim {
        rhs[kk] = -sigma2 * (kk..=l).map(|i| b[i - 1] * gseq[i - kk]).sum::<f64>();
    }
    let cseq = solve_cov(&lu, rhs)?;

    let cv = |i: isize| -> f64 { cseq[i.unsigned_abs()] };
    let ga = |i: isize| -> f64 {
        if i < 0 {
            0.0
        } else {
            gseq[i as usize]
        }
    };

    let mut dca: Vec<Vec<f64>> = Vec::with_capacity(m);
    for p in 1..=m {
        let mut rhs = DVector::zeros(kdim + 1);
        rhs[0] = cv(p as isize)
            - sigma2 * (1..=l).map(|i| b[i - 1] * dga[p - 1][i]).sum::<f64>();
        for kk in 1..=kdim {
            rhs[kk] = cv(kk as isize - p as isize)
                - sigma2 * (kk..=l).map(|i| b[i - 1] * dga[p - 1][i - kk]).sum::<f64>();
        }
        dca.push(solve_cov(&lu, rhs)?);
    }
    let mut dcb: Vec<Vec<f64>> = Vec::with_capacity(l);
    for p in 1..=l {
        let mut rhs = DVector::zeros(kdim + 1);
        rhs[0] = -sigma2
            * (ga(p as isize) + (1..=l).map(|i| b[i - 1] * dgb[p - 1][i]).sum::<f64>());
        for kk in 1..=kdim {
            rhs[kk] = -sigma2
                * (ga(p as isize - kk as isize)
                    + (kk..=l).map(|i| b[i - 1] * dgb[p - 1][i - kk]).sum::<f64>());
        }
        dcb.push(solve_cov(&lu, rhs)?);
    }

    let v0 = build_v0(a, b, sigma2, &gseq, &cseq, kdim);

    let mi = m as isize;
    let li = l as isize;
    let av = |i: isize| -> f64 { a[(i - 1) as usize] };
    let bv = |i: isize| -> f64 {
        if i < 1 || i > li {
            0.0
        } else {
            b[(i - 1) as usize]
        }
    };
    let dcav = |p: usize, i: isize| -> f64 { dca[p - 1][i.unsigned_abs()] };
    let dcbv = |p: usize, i: isize| -> f64 { dcb[p - 1][i.unsigned_abs()] };
    let dgav = |p: usize, i: isize| -> f64 {
        if i < 0 {
            0.0
        } else {
            dga[p - 1][i as usize]
        }
    };
    let dgbv = |p: usize, i: isize| -> f64 {
        if i < 0 {
            0.0
        } else {
            dgb[p - 1][i as usize]
        }
    };

    // ∂V₀/∂a_r
    let mut dv0_da = Vec::with_capacity(m);
    for r in 1..=mi {
        let mut dv = DMatrix::zeros(kdim, kdim);
        dv[(0, 0)] = dcav(r as usize, 0);
        for i in 2..=(kdim as isize) {
            let mut acc = 0.0;
            for j in i..=mi {
                acc += av(j) * dcav(r as usize, j + 1 - i);
            }
            if r >= i {
                acc += cv(r + 1 - i);
            }
            for j in (i - 1)..=li {
                acc -= sigma2 * bv(j) * dgav(r as usize, j + 1 - i);
            }
            dv[(0, (i - 1) as usize)] = acc;
            dv[((i - 1) as usize, 0)] = acc;
        }
        for i in 2..=(kdim as isize) {
            for j in i..=(kdim as isize) {
                let mut acc = 0.0;
                if r >= i {
                    for q in j..=mi {
                        acc += av(q) * cv(q - j - r + i);
                    }
                }
                if r >= j {
                    for p in i..=mi {
                        acc += av(p) * cv(r - j - p + i);
                    }
                }
                for p in i..=mi {
                    for q in j..=mi {
                        acc += av(p) * av(q) * dcav(r as usize, q - j - p + i);
                    }
                }
                if r >= i {
                    for q in (j - 1)..=li {
                        acc -= sigma2 * bv(q) * ga(q - j - r + i);
                    }
                }
                for p in i..=mi {
                    for q in (j - 1)..=li {
                        acc -= sigma2 * av(p) * bv(q) * dgav(r as usize, q - j - p + i);
                    }
                }
                if r >= j {
                    for p in (i - 1)..=li {
                        acc -= sigma2 * bv(p) * ga(p - i - r + j);
                    }
                }
                for p in (i - 1)..=li {
                    for q in j..=mi {
                        acc -= sigma2 * bv(p) * av(q) * dgav(r as usize, p - i - q + j);
                    }
                }
                dv[((i - 1) as usize, (j - 1) as usize)] = acc;
                dv[((j - 1) as usize, (i - 1) as usize)] = acc;
            }
        }
        dv0_da.push(dv);
    }

    // ∂V₀/∂b_r
    let mut dv0_db = Vec::with_capacity(l);
    for r in 1..=li {
        let mut dv = DMatrix::zeros(kdim, kdim);
        dv[(0, 0)] = dcbv(r as usize, 0);
        for i in 2..=(kdim as isize) {
            let mut acc = 0.0;
            for j in i..=mi {
                acc += av(j) * dcbv(r as usize, j + 1 - i);
            }
            // direct term: b_r appears in the sum iff r ≥ i−1, which is
            // exactly when g_{r+1−i} has a non-negative index
            acc -= sigma2 * ga(r + 1 - i);
            for j in (i - 1)..=li {
                acc -= sigma2 * bv(j) * dgbv(r as usize, j + 1 - i);
            }
            dv[(0, (i - 1) as usize)] = acc;
            dv[((i - 1) as usize, 0)] = acc;
        }
        for i in 2..=(kdim as isize) {
            for j in i..=(kdim as isize) {
                let mut acc = 0.0;
                for p in i..=mi {
                    for q in j..=mi {
                        acc += av(p) * av(q) * dcbv(r as usize, q - j - p + i);
                    }
                }
                // direct q = r terms; the impulse-response index is
                // negative whenever r is outside the q-range
                for p in i..=mi {
                    acc -= sigma2 * av(p) * ga(r - j - p + i);
                }
                for p in i..=mi {
                    for q in (j - 1)..=li {
                        acc -= sigma2 * av(p) * bv(q) * dgbv(r as usize, q - j - p + i);
                    }
                }
                for q in j..=mi {
                    acc -= sigma2 * av(q) * ga(r - i - q + j);
                }
                for p in (i - 1)..=li {
                    for q in j..=mi {
                        acc -= sigma2 * bv(p) * av(q) * dgbv(r as usize, p - i - q + j);
                    }
                }
                // ∂/∂b_r of σ² Σ_{p=i−1}^l b_p b_{p+j−i}
                if r >= i - 1 {
                    acc += sigma2 * bv(r + j - i);
                }
                if r >= j - 1 {
                    acc += sigma2 * bv(r - j + i);
                }
                dv[((i - 1) as usize, (j - 1) as usize)] = acc;
                dv[((j - 1) as usize, (i - 1) as usize)] = acc;
            }
        }
        dv0_db.push(dv);
    }

    Ok(StationaryInit {
        g: gseq[..=kdim.min(gmax)].to_vec(),
        cov: cseq,
        v0,
        dv0_da,
        dv0_db,
    })
}

/// Maps unconstrained coordinates to ARMA coefficients through PARCOR
/// transforms on both sides, returning the block-diagonal Jacobian
/// `∂(a, b)/∂θ`. Every real input yields a stationary AR part and an
/// invertible MA part.
pub fn transform_arma_params(
    theta: &[f64],
    ar_order: usize,
    bound: f64,
) -> (Vec<f64>, Vec<f64>, DMatrix<f64>) {
    let ma_order = theta.len() - ar_order;
    let ar_chain = ParcorChain::from_unconstrained(&theta[..ar_order], bound);
    let ma_chain = ParcorChain::from_unconstrained(&theta[ar_order..], bound);
    let p = ar_order + ma_order;
    let mut jac = DMatrix::zeros(p, p);
    for i in 0..ar_order {
        for j in 0..ar_order {
            jac[(i, j)] = ar_chain.jacobian[(i, j)];
        }
    }
    for i in 0..ma_order {
        for j in 0..ma_order {
            jac[(ar_order + i, ar_order + j)] = ma_chain.jacobian[(i, j)];
        }
    }
    (ar_chain.a, ma_chain.a, jac)
}

/// Builds the state-space form of an ARMA model at `theta` with unit
/// innovation variance (the concentrated convention).
///
/// Derivative stacks: `∂F/∂aₚ` has a single 1 in row `p` of the first
/// column, `∂G/∂b_q` a single −1 in row `q+1`, and `∂V₀` comes from
/// [`initial_covariance_derivatives`]; in transformed coordinates all
/// stacks are pushed through the PARCOR chain rule.
pub fn build_arma(
    spec: &ArmaSpec,
    theta: &[f64],
) -> Result<(ModelMatrices, InitialCondition), ModelError> {
    let m = spec.ar_order;
    let l = spec.ma_order;
    let p = spec.param_dim();
    if theta.len() != p {
        return Err(ModelError::BadDimension {
            expected: p,
            got: theta.len(),
        });
    }
    let (a, b, jac) = match spec.parameterization {
        Parameterization::Raw => {
            let a = theta[..m].to_vec();
            let b = theta[m..].to_vec();
            let radius = companion_spectral_radius(&a);
            if radius >= 1.0 {
                return Err(ModelError::NonStationary { radius });
            }
            (a, b, None)
        }
        Parameterization::Transformed => {
            let (a, b, jac) = transform_arma_params(theta, m, spec.parcor_bound);
            (a, b, Some(jac))
        }
    };

    let dims = spec.dims();
    let kdim = dims.state_dim;
    let sigma2 = 1.0;
    let init_parts = stationary_init(&a, &b, sigma2)?;

    let mut f = DMatrix::zeros(kdim, kdim);
    for (i, &ai) in a.iter().enumerate() {
        f[(i, 0)] = ai;
    }
    for i in 0..kdim - 1 {
        f[(i, i + 1)] = 1.0;
    }
    let mut g = DMatrix::zeros(kdim, 1);
    g[(0, 0)] = 1.0;
    for (q, &bq) in b.iter().enumerate() {
        g[(q + 1, 0)] = -bq;
    }
    let mut h = DVector::zeros(kdim);
    h[0] = 1.0;
    let q = DMatrix::from_element(1, 1, sigma2);

    let mut mm = ModelMatrices::with_zero_derivatives(&dims, f, g, h, q, 0.0);

    // raw-coordinate structure derivatives
    let df_a: Vec<DMatrix<f64>> = (0..m)
        .map(|pa| {
            let mut d = DMatrix::zeros(kdim, kdim);
            d[(pa, 0)] = 1.0;
            d
        })
        .collect();
    let dg_b: Vec<DMatrix<f64>> = (0..l)
        .map(|qb| {
            let mut d = DMatrix::zeros(kdim, 1);
            d[(qb + 1, 0)] = -1.0;
            d
        })
        .collect();

    let mut dv0 = vec![DMatrix::zeros(kdim, kdim); p];
    match &jac {
        None => {
            for j in 0..m {
                mm.df[j] = df_a[j].clone();
                dv0[j] = init_parts.dv0_da[j].clone();
            }
            for j in 0..l {
                mm.dg[m + j] = dg_b[j].clone();
                dv0[m + j] = init_parts.dv0_db[j].clone();
            }
        }
        Some(jac) => {
            for j in 0..m {
                let mut df = DMatrix::zeros(kdim, kdim);
                let mut dv = DMatrix::zeros(kdim, kdim);
                for i in 0..m {
                    let w = jac[(i, j)];
                    df[(i, 0)] = w;
                    if w != 0.0 {
                        dv += w * &init_parts.dv0_da[i];
                    }
                }
                mm.df[j] = df;
                dv0[j] = dv;
            }
            for j in 0..l {
                let mut dg = DMatrix::zeros(kdim, 1);
                let mut dv = DMatrix::zeros(kdim, kdim);
                for i in 0..l {
                    let w = jac[(m + i, m + j)];
                    dg[(i + 1, 0)] = -w;
                    if w != 0.0 {
                        dv += w * &init_parts.dv0_db[i];
                    }
                }
                mm.dg[m + j] = dg;
                dv0[m + j] = dv;
            }
        }
    }

    let mut init = InitialCondition::constant(&dims, DVector::zeros(kdim), init_parts.v0);
    init.dv0 = dv0;

    #[cfg(debug_assertions)]
    {
        let residual = &init.v0
            - &mm.f * &init.v0 * mm.f.transpose()
            - sigma2 * &mm.g * mm.g.transpose();
        let scale = max_abs(&init.v0).max(1.0);
        debug_assert!(
            max_abs(&residual) <= 1e-10 * scale,
            "stationary V0 violates the Lyapunov identity: residual {} at a={a:?} b={b:?}",
            max_abs(&residual)
        );
    }

    Ok((mm, init))
}

/// Concentrated variance estimate and log-likelihood:
/// `σ̂² = (1/N) Σ εₙ²/rₙ`,
/// `ℓ = −½ { N log 2π + N log σ̂² + Σ log rₙ + N }`.
pub fn concentrated_loglik(recs: &[InnovationRecord]) -> Result<(f64, f64), FilterError> {
    let n = recs.len() as f64;
    let mut quad = Kahan::default();
    let mut logs = Kahan::default();
    for rec in recs {
        quad.add(rec.eps * rec.eps / rec.r);
        logs.add(rec.r.ln());
    }
    let sigma2_hat = quad.value() / n;
    if !(sigma2_hat > 0.0) {
        return Err(FilterError::DegenerateVariance { sigma2: sigma2_hat });
    }
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    let loglik = -0.5 * (n * ln_2pi + n * sigma2_hat.ln() + logs.value() + n);
    Ok((sigma2_hat, loglik))
}

/// Gradient of the concentrated log-likelihood:
/// `∂ℓ/∂θ = −½ Σ ∂r/r − (1/σ̂²) Σ (ε/r) ∂ε + (1/2σ̂²) Σ (ε²/r²) ∂r`.
///
/// Holding σ̂² at its maximizing value contributes nothing extra (the
/// envelope property), so this is the exact derivative of
/// [`concentrated_loglik`] in θ.
pub fn concentrated_gradient(
    recs: &[InnovationRecord],
    grecs: &[GradInnovation],
    sigma2_hat: f64,
) -> DVector<f64> {
    let (s1, s2, s3) = grad_sums(recs, grecs);
    DVector::from_fn(s1.len(), |j, _| {
        -0.5 * s1[j] - s2[j] / sigma2_hat + s3[j] / (2.0 * sigma2_hat)
    })
}

/// [`ModelProvider`] for ARMA models.
///
/// By default the innovation variance is concentrated out: the filter
/// runs with `Q = 1` and the drivers recover σ̂² and use the
/// concentrated likelihood and gradient. [`with_fixed_sigma2`] pins σ²
/// instead (scaling `Q` and `V₀`), producing an ordinary
/// non-concentrated model; this is what the concentration identity
/// tests against, and what simulation uses.
///
/// [`with_fixed_sigma2`]: ArmaProvider::with_fixed_sigma2
#[derive(Clone, Copy, Debug)]
pub struct ArmaProvider {
    pub spec: ArmaSpec,
    sigma2: Option<f64>,
}

impl ArmaProvider {
    pub fn new(spec: ArmaSpec) -> Self {
        Self { spec, sigma2: None }
    }

    pub fn with_fixed_sigma2(spec: ArmaSpec, sigma2: f64) -> Self {
        assert!(sigma2 > 0.0, "sigma2 must be positive");
        Self {
            spec,
            sigma2: Some(sigma2),
        }
    }

    /// Coefficients in structural coordinates at `theta`.
    pub fn coefficients(&self, theta: &[f64]) -> Result<ArmaCoefficients, ModelError> {
        let m = self.spec.ar_order;
        if theta.len() != self.spec.param_dim() {
            return Err(ModelError::BadDimension {
                expected: self.spec.param_dim(),
                got: theta.len(),
            });
        }
        let (a, b) = match self.spec.parameterization {
            Parameterization::Raw => (theta[..m].to_vec(), theta[m..].to_vec()),
            Parameterization::Transformed => {
                let (a, b, _) = transform_arma_params(theta, m, self.spec.parcor_bound);
                (a, b)
            }
        };
        Ok(ArmaCoefficients {
            a,
            b,
            sigma2: self.sigma2.unwrap_or(1.0),
        })
    }

    /// Jacobian `∂(a, b)/∂θ` at `theta` (identity in raw coordinates).
    pub fn coefficient_jacobian(&self, theta: &[f64]) -> DMatrix<f64> {
        match self.spec.parameterization {
            Parameterization::Raw => DMatrix::identity(theta.len(), theta.len()),
            Parameterization::Transformed => {
                let (_, _, jac) = transform_arma_params(theta, self.spec.ar_order, self.spec.parcor_bound);
                jac
            }
        }
    }

    pub fn structural_params(&self, theta: &[f64]) -> Vec<(String, f64)> {
        let coeffs = match self.coefficients(theta) {
            Ok(c) => c,
            Err(_) => return Vec::new(),
        };
        let mut out = Vec::new();
        for (i, &ai) in coeffs.a.iter().enumerate() {
            out.push((format!("a{}", i + 1), ai));
        }
        for (i, &bi) in coeffs.b.iter().enumerate() {
            out.push((format!("b{}", i + 1), bi));
        }
        out
    }
}

impl ModelProvider for ArmaProvider {
    fn dims(&self) -> ModelDims {
        self.spec.dims()
    }

    fn eval(&self, theta: &[f64], _want_second: bool) -> Result<Model, ModelError> {
        let (mut mats, mut init) = build_arma(&self.spec, theta)?;
        if let Some(s2) = self.sigma2 {
            // V0 and its derivatives scale linearly with σ².
            mats.q *= s2;
            init.v0 *= s2;
            for dv in &mut init.dv0 {
                *dv *= s2;
            }
        }
        Ok(Model {
            dims: self.dims(),
            mats,
            init,
        })
    }

    fn concentrated_variance(&self) -> bool {
        self.sigma2.is_none()
    }
}
