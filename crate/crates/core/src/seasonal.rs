//! Seasonal adjustment models: trend + seasonal components, optionally
//! extended with a stationary AR component.
//!
//! The observation decomposes as `y = T + S (+ p) + w` with a
//! second-order trend `T_n = 2T_{n-1} − T_{n-2} + u_n`, a seasonal sum
//! `S_n = −(S_{n-1} + ⋯ + S_{n-period+1}) + v_n` and, when `ar_order > 0`,
//! an AR component `p_n = Σ aⱼ p_{n-j} + v'_n`.
//!
//! Unconstrained parameters are the log noise variances followed by the
//! PARCOR-transformed AR coefficients: the Levinson recursion maps
//! partial autocorrelations in `(−C, C)` to AR coefficients that always
//! satisfy the stationarity condition, and its exact Jacobian carries
//! the chain rule into the `∂F/∂θ` stacks.

use nalgebra::{DMatrix, DVector};

use crate::error::ModelError;
use crate::statespace::{
    pair_index, InitialCondition, Model, ModelDims, ModelMatrices, ModelProvider, SecondDerivs,
};

/// Approximately diffuse prior variance for the initial state.
const DIFFUSE_PRIOR: f64 = 1e4;

/// Step for the finite-difference layer that supplies `∂²a/∂θ²` when the
/// Hessian filter runs on a model with an AR component.
const JACOBIAN_FD_STEP: f64 = 1e-5;

/// Structural configuration of a seasonal adjustment model.
///
/// `ar_order = 0` selects the standard trend + seasonal model with
/// parameters `(log τ₁², log τ₂², log σ²)`; `ar_order = m₃ > 0` adds the
/// AR block and the parameter vector becomes
/// `(log τ₁², log τ₂², log τ₃², log σ², θ_a₁ … θ_aₘ₃)`.
#[derive(Clone, Copy, Debug)]
pub struct SeasonalSpec {
    /// Seasonal period (e.g. 12 for monthly data).
    pub period: usize,
    /// Order of the stationary AR component; 0 disables it.
    pub ar_order: usize,
    /// Bound `C` on the partial autocorrelations. Strictly below 1 so
    /// optimizer iterates cannot touch the stationarity boundary.
    pub parcor_bound: f64,
}

impl SeasonalSpec {
    pub fn new(period: usize, ar_order: usize) -> Self {
        assert!(period >= 2, "seasonal period must be at least 2");
        Self {
            period,
            ar_order,
            parcor_bound: 0.99,
        }
    }

    /// Trend order is fixed at 2.
    pub const TREND_ORDER: usize = 2;

    pub fn state_dim(&self) -> usize {
        2 + (self.period - 1) + self.ar_order
    }

    pub fn noise_dim(&self) -> usize {
        if self.ar_order > 0 {
            3
        } else {
            2
        }
    }

    pub fn param_dim(&self) -> usize {
        if self.ar_order > 0 {
            4 + self.ar_order
        } else {
            3
        }
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims::new(self.state_dim(), self.noise_dim(), self.param_dim())
    }

    /// Index of `log σ²` in the parameter vector.
    fn sigma_index(&self) -> usize {
        if self.ar_order > 0 {
            3
        } else {
            2
        }
    }

    /// First state index of the AR block.
    fn ar_row(&self) -> usize {
        2 + (self.period - 1)
    }
}

/// Noise variances in structural coordinates together with their
/// unconstrained images `θ = log(variance)`.
#[derive(Clone, Copy, Debug)]
pub struct VarianceParams {
    pub tau1_sq: f64,
    pub tau2_sq: f64,
    /// AR-component variance; absent when `ar_order = 0`.
    pub tau3_sq: Option<f64>,
    pub sigma_sq: f64,
}

impl VarianceParams {
    pub fn from_unconstrained(theta: &[f64], ar_order: usize) -> Self {
        if ar_order > 0 {
            Self {
                tau1_sq: theta[0].exp(),
                tau2_sq: theta[1].exp(),
                tau3_sq: Some(theta[2].exp()),
                sigma_sq: theta[3].exp(),
            }
        } else {
            Self {
                tau1_sq: theta[0].exp(),
                tau2_sq: theta[1].exp(),
                tau3_sq: None,
                sigma_sq: theta[2].exp(),
            }
        }
    }

    pub fn to_unconstrained(&self) -> Vec<f64> {
        let mut theta = vec![self.tau1_sq.ln(), self.tau2_sq.ln()];
        if let Some(t3) = self.tau3_sq {
            theta.push(t3.ln());
        }
        theta.push(self.sigma_sq.ln());
        theta
    }
}

/// Levinson recursion: maps partial autocorrelations `β` (all strictly
/// inside the unit interval) to the AR coefficients of the same order.
pub fn parcor_to_ar(beta: &[f64]) -> Vec<f64> {
    let order = beta.len();
    let mut a = vec![0.0; order];
    for m in 1..=order {
        let prev: Vec<f64> = a[..m - 1].to_vec();
        for j in 1..m {
            a[j - 1] = prev[j - 1] - beta[m - 1] * prev[m - 1 - j];
        }
        a[m - 1] = beta[m - 1];
    }
    a
}

/// Exact Jacobian `∂aᵢ/∂βₖ` of [`parcor_to_ar`], built stage by stage
/// from the case rules of the recursion.
pub fn parcor_jacobian(beta: &[f64]) -> DMatrix<f64> {
    let order = beta.len();
    let mut jac = DMatrix::zeros(order, order);
    let mut a_prev: Vec<f64> = Vec::new();
    for m in 1..=order {
        let jac_prev = jac.clone();
        for i in 1..=m {
            for k in 1..=m {
                jac[(i - 1, k - 1)] = if i == m && k < m {
                    0.0
                } else if i == m && k == m {
                    1.0
                } else if k == m {
                    // i < m
                    -a_prev[m - i - 1]
                } else {
                    // i < m, k < m
                    jac_prev[(i - 1, k - 1)] - beta[m - 1] * jac_prev[(m - i - 1, k - 1)]
                };
            }
        }
        // advance the coefficient vector to stage m
        let prev = a_prev.clone();
        a_prev = vec![0.0; m];
        for j in 1..m {
            a_prev[j - 1] = prev[j - 1] - beta[m - 1] * prev[m - 1 - j];
        }
        a_prev[m - 1] = beta[m - 1];
    }
    jac
}

/// Maps one unconstrained coordinate to a partial autocorrelation in
/// `(−C, C)` and returns the derivative as well:
/// `β = C (e^θ − 1)/(e^θ + 1) = C tanh(θ/2)`, `dβ/dθ = 2C e^θ/(e^θ+1)²`.
pub fn unconstrained_to_parcor(theta: f64, bound: f64) -> (f64, f64) {
    let t = (0.5 * theta).tanh();
    (bound * t, 0.5 * bound * (1.0 - t * t))
}

/// The full chain from unconstrained AR coordinates to AR coefficients:
/// PARCORs, coefficients and the Jacobian `∂aᵢ/∂θⱼ`.
#[derive(Clone, Debug)]
pub struct ParcorChain {
    pub beta: Vec<f64>,
    pub a: Vec<f64>,
    /// `jacobian[(i, j)] = ∂aᵢ/∂θⱼ`; lower-triangular structure in the
    /// PARCOR factor because stage `m` coefficients depend only on
    /// `β₁…βₘ`.
    pub jacobian: DMatrix<f64>,
}

impl ParcorChain {
    pub fn from_unconstrained(theta_ar: &[f64], bound: f64) -> Self {
        let order = theta_ar.len();
        let mut beta = Vec::with_capacity(order);
        let mut dbeta = Vec::with_capacity(order);
        for &t in theta_ar {
            let (b, db) = unconstrained_to_parcor(t, bound);
            beta.push(b);
            dbeta.push(db);
        }
        let a = parcor_to_ar(&beta);
        let mut jacobian = parcor_jacobian(&beta);
        // chain through dβⱼ/dθⱼ (diagonal)
        for j in 0..order {
            for i in 0..order {
                jacobian[(i, j)] *= dbeta[j];
            }
        }
        Self { beta, a, jacobian }
    }
}

/// `∂²aᵢ/∂θⱼ∂θₖ` via central finite differences of the analytic
/// θ-Jacobian; exactness is only claimed for the variance parameters,
/// this layer feeds the Hessian filter's AR block.
fn parcor_chain_second(theta_ar: &[f64], bound: f64) -> Vec<DMatrix<f64>> {
    let order = theta_ar.len();
    // tensor[k] holds ∂(∂a/∂θ)/∂θₖ as an order×order matrix
    let mut per_direction = Vec::with_capacity(order);
    for k in 0..order {
        let h = JACOBIAN_FD_STEP * theta_ar[k].abs().max(1.0);
        let mut plus = theta_ar.to_vec();
        plus[k] += h;
        let mut minus = theta_ar.to_vec();
        minus[k] -= h;
        let jp = ParcorChain::from_unconstrained(&plus, bound).jacobian;
        let jm = ParcorChain::from_unconstrained(&minus, bound).jacobian;
        per_direction.push((jp - jm) / (2.0 * h));
    }
    // symmetrize the two estimates of each mixed partial
    let npairs = order * (order + 1) / 2;
    let mut out = vec![DMatrix::zeros(order, 1); npairs];
    for j in 0..order {
        for k in j..order {
            let idx = pair_index(j, k, order);
            let mut col = DMatrix::zeros(order, 1);
            for i in 0..order {
                col[(i, 0)] = 0.5 * (per_direction[k][(i, j)] + per_direction[j][(i, k)]);
            }
            out[idx] = col;
        }
    }
    out
}

/// Builds the structure matrices and initial condition of a seasonal
/// adjustment model at the unconstrained parameter vector `theta`.
///
/// Block layout of the state: trend `(T_n, T_{n-1})`, seasonal
/// `(S_n, …, S_{n-period+2})`, then the AR block `(p_n, …, p_{n-m₃+1})`.
/// `F`, `G` and `H` carry no parameters except for the AR row of `F`;
/// `Q` is the diagonal of component variances and `R = σ²`. Second
/// derivatives of `Q` and `R` are exact under the log transform
/// (`∂²e^θ/∂θ² = e^θ`); the AR block's `∂²F` comes from a
/// finite-difference layer over the analytic PARCOR Jacobian.
pub fn build_seasonal(
    spec: &SeasonalSpec,
    theta: &[f64],
) -> Result<(ModelMatrices, InitialCondition), ModelError> {
    let p = spec.param_dim();
    if theta.len() != p {
        return Err(ModelError::BadDimension {
            expected: p,
            got: theta.len(),
        });
    }
    let dims = spec.dims();
    let m = dims.state_dim;
    let k = dims.noise_dim;
    let period = spec.period;
    let m3 = spec.ar_order;
    let vars = VarianceParams::from_unconstrained(theta, m3);
    let ar_row = spec.ar_row();
    let sigma_idx = spec.sigma_index();

    let chain = if m3 > 0 {
        Some(ParcorChain::from_unconstrained(&theta[4..], spec.parcor_bound))
    } else {
        None
    };

    // --- F ---
    let mut f = DMatrix::zeros(m, m);
    f[(0, 0)] = 2.0;
    f[(0, 1)] = -1.0;
    f[(1, 0)] = 1.0;
    for c in 0..(period - 1) {
        f[(2, 2 + c)] = -1.0;
    }
    for i in 1..(period - 1) {
        f[(2 + i, 2 + i - 1)] = 1.0;
    }
    if let Some(chain) = &chain {
        for (j, &aj) in chain.a.iter().enumerate() {
            f[(ar_row, ar_row + j)] = aj;
        }
        for i in 1..m3 {
            f[(ar_row + i, ar_row + i - 1)] = 1.0;
        }
    }

    // --- G, H ---
    let mut g = DMatrix::zeros(m, k);
    g[(0, 0)] = 1.0;
    g[(2, 1)] = 1.0;
    if m3 > 0 {
        g[(ar_row, 2)] = 1.0;
    }
    let mut h = DVector::zeros(m);
    h[0] = 1.0;
    h[2] = 1.0;
    if m3 > 0 {
        h[ar_row] = 1.0;
    }

    // --- Q, R ---
    let mut q = DMatrix::zeros(k, k);
    q[(0, 0)] = vars.tau1_sq;
    q[(1, 1)] = vars.tau2_sq;
    if let Some(t3) = vars.tau3_sq {
        q[(2, 2)] = t3;
    }
    let r = vars.sigma_sq;

    let mut mm = ModelMatrices::with_zero_derivatives(&dims, f, g, h, q, r);

    // --- first derivatives: log transform gives ∂τ²/∂θ = τ² ---
    mm.dq[0][(0, 0)] = vars.tau1_sq;
    mm.dq[1][(1, 1)] = vars.tau2_sq;
    if let Some(t3) = vars.tau3_sq {
        mm.dq[2][(2, 2)] = t3;
    }
    mm.dr[sigma_idx] = vars.sigma_sq;
    if let Some(chain) = &chain {
        for j in 0..m3 {
            for i in 0..m3 {
                mm.df[4 + j][(ar_row, ar_row + i)] = chain.jacobian[(i, j)];
            }
        }
    }

    // --- second derivatives ---
    let mut d2 = SecondDerivs::zeros(&dims);
    d2.d2q[pair_index(0, 0, p)][(0, 0)] = vars.tau1_sq;
    d2.d2q[pair_index(1, 1, p)][(1, 1)] = vars.tau2_sq;
    if let Some(t3) = vars.tau3_sq {
        d2.d2q[pair_index(2, 2, p)][(2, 2)] = t3;
    }
    d2.d2r[pair_index(sigma_idx, sigma_idx, p)] = vars.sigma_sq;
    if m3 > 0 {
        let d2a = parcor_chain_second(&theta[4..], spec.parcor_bound);
        for j in 0..m3 {
            for kk in j..m3 {
                let local = pair_index(j, kk, m3);
                let global = pair_index(4 + j, 4 + kk, p);
                for i in 0..m3 {
                    d2.d2f[global][(ar_row, ar_row + i)] = d2a[local][(i, 0)];
                }
            }
        }
    }
    mm.d2 = Some(d2);

    // x0 = 0, V0 = κI: an approximately diffuse prior that carries no
    // parameter dependence, so all its derivative stacks vanish.
    let init = InitialCondition::constant(
        &dims,
        DVector::zeros(m),
        DMatrix::identity(m, m) * DIFFUSE_PRIOR,
    )
    .with_zero_second_derivatives(&dims);

    Ok((mm, init))
}

/// [`ModelProvider`] for the seasonal adjustment family.
#[derive(Clone, Copy, Debug)]
pub struct SeasonalProvider {
    pub spec: SeasonalSpec,
}

impl SeasonalProvider {
    pub fn new(spec: SeasonalSpec) -> Self {
        Self { spec }
    }

    /// Structural coordinates (variances, then AR coefficients) with
    /// display names, for reporting.
    pub fn structural_params(&self, theta: &[f64]) -> Vec<(String, f64)> {
        let vars = VarianceParams::from_unconstrained(theta, self.spec.ar_order);
        let mut out = vec![
            ("tau1^2".to_string(), vars.tau1_sq),
            ("tau2^2".to_string(), vars.tau2_sq),
        ];
        if let Some(t3) = vars.tau3_sq {
            out.push(("tau3^2".to_string(), t3));
        }
        out.push(("sigma^2".to_string(), vars.sigma_sq));
        if self.spec.ar_order > 0 {
            let chain = ParcorChain::from_unconstrained(&theta[4..], self.spec.parcor_bound);
            for (i, &ai) in chain.a.iter().enumerate() {
                out.push((format!("a{}", i + 1), ai));
            }
        }
        out
    }
}

impl ModelProvider for SeasonalProvider {
    fn dims(&self) -> ModelDims {
        self.spec.dims()
    }

    fn eval(&self, theta: &[f64], _want_second: bool) -> Result<Model, ModelError> {
        let (mats, init) = build_seasonal(&self.spec, theta)?;
        Ok(Model {
            dims: self.dims(),
            mats,
            init,
        })
    }

    fn has_second_derivatives(&self) -> bool {
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::statespace::validate_model;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn standard_model_shapes_and_zero_structure() {
        let spec = SeasonalSpec::new(4, 0);
        assert_eq!(spec.state_dim(), 5);
        assert_eq!(spec.param_dim(), 3);
        let (mm, _) = build_seasonal(&spec, &[-1.0, -2.0, 0.5]).unwrap();
        for j in 0..3 {
            assert_eq!(mm.df[j], DMatrix::zeros(5, 5));
            assert_eq!(mm.dg[j], DMatrix::zeros(5, 2));
            assert_eq!(mm.dh[j], DVector::zeros(5));
        }
        // ∂Q/∂θ₃ is the zero matrix; only R depends on θ₃.
        assert_eq!(mm.dq[2], DMatrix::zeros(2, 2));
        assert_eq!(mm.dr[2], 0.5f64.exp());
        assert_eq!(mm.dr[0], 0.0);
    }

    #[test]
    fn trend_block_follows_the_difference_equation() {
        let spec = SeasonalSpec::new(4, 0);
        let (mm, _) = build_seasonal(&spec, &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(mm.f[(0, 0)], 2.0);
        assert_eq!(mm.f[(0, 1)], -1.0);
        assert_eq!(mm.f[(1, 0)], 1.0);
        assert_eq!(mm.f[(1, 1)], 0.0);
        // seasonal row: all −1
        for c in 0..3 {
            assert_eq!(mm.f[(2, 2 + c)], -1.0);
        }
        assert_eq!(mm.h.as_slice(), &[1.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn ar_coefficients_land_in_the_ar_row() {
        // β = (0.5, 0.2) with C = 1 gives a = (0.4, 0.2).
        let mut spec = SeasonalSpec::new(4, 2);
        spec.parcor_bound = 1.0;
        let theta_ar = [2.0 * 0.5f64.atanh(), 2.0 * 0.2f64.atanh()];
        let theta = [-1.0, -2.0, -0.5, 0.0, theta_ar[0], theta_ar[1]];
        let (mm, _) = build_seasonal(&spec, &theta).unwrap();
        let ar_row = 2 + 3;
        assert_relative_eq!(mm.f[(ar_row, ar_row)], 0.4, epsilon = 1e-12);
        assert_relative_eq!(mm.f[(ar_row, ar_row + 1)], 0.2, epsilon = 1e-12);
        assert_eq!(mm.f[(ar_row + 1, ar_row)], 1.0);
        // H picks trend, seasonal and AR heads.
        assert_eq!(mm.h[0], 1.0);
        assert_eq!(mm.h[2], 1.0);
        assert_eq!(mm.h[ar_row], 1.0);
    }

    #[test]
    fn wrong_theta_length_is_rejected() {
        let spec = SeasonalSpec::new(12, 0);
        assert!(matches!(
            build_seasonal(&spec, &[0.0, 0.0]),
            Err(ModelError::BadDimension { expected: 3, got: 2 })
        ));
    }

    #[test]
    fn parcor_to_ar_examples() {
        assert_eq!(parcor_to_ar(&[0.7]), vec![0.7]);
        let a = parcor_to_ar(&[0.5, 0.2]);
        assert_relative_eq!(a[0], 0.4, epsilon = 1e-15);
        assert_relative_eq!(a[1], 0.2, epsilon = 1e-15);
    }

    #[test]
    fn parcor_to_ar_is_always_stationary() {
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..200 {
            let order = rng.random_range(1..=6);
            let beta: Vec<f64> = (0..order).map(|_| rng.random_range(-0.999..0.999)).collect();
            let a = parcor_to_ar(&beta);
            let radius = crate::linalg::companion_spectral_radius(&a);
            assert!(radius < 1.0, "beta {beta:?} gave radius {radius}");
        }
    }

    #[test]
    fn parcor_jacobian_hand_values() {
        assert_eq!(parcor_jacobian(&[0.3])[(0, 0)], 1.0);
        let j = parcor_jacobian(&[0.5, 0.2]);
        assert_relative_eq!(j[(0, 0)], 0.8, epsilon = 1e-15); // 1 − β₂
        assert_relative_eq!(j[(0, 1)], -0.5, epsilon = 1e-15); // −a₁⁽¹⁾
        assert_relative_eq!(j[(1, 0)], 0.0, epsilon = 1e-15);
        assert_relative_eq!(j[(1, 1)], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn parcor_jacobian_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..20 {
            let order = rng.random_range(1..=5);
            let beta: Vec<f64> = (0..order).map(|_| rng.random_range(-0.9..0.9)).collect();
            let jac = parcor_jacobian(&beta);
            let h = 1e-7;
            for k in 0..order {
                let mut bp = beta.clone();
                bp[k] += h;
                let mut bm = beta.clone();
                bm[k] -= h;
                let ap = parcor_to_ar(&bp);
                let am = parcor_to_ar(&bm);
                for i in 0..order {
                    let fd = (ap[i] - am[i]) / (2.0 * h);
                    let denom = fd.abs().max(jac[(i, k)].abs()).max(1e-8);
                    assert!(
                        (fd - jac[(i, k)]).abs() / denom < 1e-6,
                        "entry ({i},{k}): fd {fd} vs {}",
                        jac[(i, k)]
                    );
                }
            }
        }
    }

    #[test]
    fn unconstrained_to_parcor_examples() {
        let (b, db) = unconstrained_to_parcor(0.0, 1.0);
        assert_eq!(b, 0.0);
        assert_eq!(db, 0.5);
        let (b, db) = unconstrained_to_parcor(1.0, 1.0);
        assert_relative_eq!(b, 0.462117, epsilon = 1e-6);
        assert_relative_eq!(db, 0.393224, epsilon = 1e-6);
        // saturation
        let (b, _) = unconstrained_to_parcor(50.0, 0.99);
        assert_relative_eq!(b, 0.99, epsilon = 1e-12);
        let (b, _) = unconstrained_to_parcor(800.0, 1.0);
        assert!(b <= 1.0 && b > 0.9999);
    }

    /// Reverse Levinson recursion, used here as an independent oracle.
    fn ar_to_parcor(a: &[f64]) -> Vec<f64> {
        let order = a.len();
        let mut beta = vec![0.0; order];
        let mut coef = a.to_vec();
        for m in (1..=order).rev() {
            let bm = coef[m - 1];
            beta[m - 1] = bm;
            let cur = coef.clone();
            for j in 1..m {
                coef[j - 1] = (cur[j - 1] + bm * cur[m - 1 - j]) / (1.0 - bm * bm);
            }
        }
        beta
    }

    #[test]
    fn levinson_round_trip() {
        let mut rng = StdRng::seed_from_u64(3);
        for _ in 0..100 {
            let order = rng.random_range(1..=6);
            let beta: Vec<f64> = (0..order).map(|_| rng.random_range(-0.95..0.95)).collect();
            let a = parcor_to_ar(&beta);
            let back = ar_to_parcor(&a);
            let again = parcor_to_ar(&back);
            for i in 0..order {
                assert_relative_eq!(a[i], again[i], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn built_models_validate_cleanly() {
        let mut rng = StdRng::seed_from_u64(5);
        for &ar in &[0usize, 1, 2, 3] {
            let spec = SeasonalSpec::new(12, ar);
            let provider = SeasonalProvider::new(spec);
            for _ in 0..10 {
                let theta: Vec<f64> = (0..spec.param_dim())
                    .map(|_| rng.random_range(-4.0..1.5))
                    .collect();
                let model = provider.eval(&theta, true).unwrap();
                let report = validate_model(&model.mats, &model.init, &model.dims);
                assert!(report.is_empty(), "{report:?}");
            }
        }
    }

    #[test]
    fn provider_evaluation_is_pure() {
        let provider = SeasonalProvider::new(SeasonalSpec::new(12, 2));
        let theta = [-1.0, -2.0, -3.0, 0.5, 0.3, -0.4];
        let a = provider.eval(&theta, true).unwrap();
        let b = provider.eval(&theta, true).unwrap();
        assert_eq!(a.mats.f, b.mats.f);
        assert_eq!(a.mats.q, b.mats.q);
        assert_eq!(a.mats.df, b.mats.df);
        assert_eq!(a.init.v0, b.init.v0);
    }
}
