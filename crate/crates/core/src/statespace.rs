//! Model abstraction: dimensions, structure matrices, derivative stacks
//! and initial conditions consumed by every filter in the crate.
//!
//! The model is
//!
//! ```text
//! x_n = F x_{n-1} + G v_n,   v_n ~ N(0, Q)
//! y_n = H x_n + w_n,         w_n ~ N(0, R)
//! ```
//!
//! with a scalar observation. All matrices are time-invariant: a
//! [`ModelProvider`] evaluates them once per parameter vector, together
//! with their first (and optionally second) element-wise derivatives
//! with respect to the unconstrained parameters.

use nalgebra::{DMatrix, DVector};

use crate::error::ModelError;

/// Problem dimensions. The observation is always scalar.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    /// State dimension `m`.
    pub state_dim: usize,
    /// System-noise dimension `k`.
    pub noise_dim: usize,
    /// Number of unconstrained parameters `p`.
    pub param_dim: usize,
}

impl ModelDims {
    pub const OBS_DIM: usize = 1;

    pub fn new(state_dim: usize, noise_dim: usize, param_dim: usize) -> Self {
        assert!(state_dim >= 1, "state_dim must be at least 1");
        assert!(noise_dim >= 1, "noise_dim must be at least 1");
        assert!(param_dim >= 1, "param_dim must be at least 1");
        Self {
            state_dim,
            noise_dim,
            param_dim,
        }
    }

    /// Number of ordered parameter pairs `(j, k)` with `j <= k`.
    pub fn pair_count(&self) -> usize {
        pair_count(self.param_dim)
    }
}

/// Number of parameter pairs `(j, k)` with `j <= k` for `p` parameters.
pub fn pair_count(p: usize) -> usize {
    p * (p + 1) / 2
}

/// Flat index of the unordered pair `(j, k)` in a pair stack. Symmetric
/// in its arguments, so `(k, j)` reads the same slot.
pub fn pair_index(j: usize, k: usize, p: usize) -> usize {
    let (lo, hi) = if j <= k { (j, k) } else { (k, j) };
    debug_assert!(hi < p);
    lo * p - lo * (lo + 1) / 2 + hi
}

/// Second-derivative stacks, indexed by [`pair_index`]. When present
/// they must be complete for every pair.
#[derive(Clone, Debug)]
pub struct SecondDerivs {
    pub d2f: Vec<DMatrix<f64>>,
    pub d2g: Vec<DMatrix<f64>>,
    pub d2h: Vec<DVector<f64>>,
    pub d2q: Vec<DMatrix<f64>>,
    pub d2r: Vec<f64>,
}

impl SecondDerivs {
    /// All-zero stacks for a model whose matrices are at most linear in
    /// the parameters.
    pub fn zeros(dims: &ModelDims) -> Self {
        let np = dims.pair_count();
        Self {
            d2f: vec![DMatrix::zeros(dims.state_dim, dims.state_dim); np],
            d2g: vec![DMatrix::zeros(dims.state_dim, dims.noise_dim); np],
            d2h: vec![DVector::zeros(dims.state_dim); np],
            d2q: vec![DMatrix::zeros(dims.noise_dim, dims.noise_dim); np],
            d2r: vec![0.0; np],
        }
    }
}

/// Structure matrices and their derivative stacks at one parameter point.
///
/// `h` stores the observation row `H` as a column vector, so `H x` is
/// `h.dot(x)` and `V Hᵀ` is `v * h`. `dX[j]` is the element-wise partial
/// derivative of `X` with respect to parameter `j`.
#[derive(Clone, Debug)]
pub struct ModelMatrices {
    pub f: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub h: DVector<f64>,
    pub q: DMatrix<f64>,
    pub r: f64,
    pub df: Vec<DMatrix<f64>>,
    pub dg: Vec<DMatrix<f64>>,
    pub dh: Vec<DVector<f64>>,
    pub dq: Vec<DMatrix<f64>>,
    pub dr: Vec<f64>,
    pub d2: Option<SecondDerivs>,
}

impl ModelMatrices {
    /// A model with the given matrices and all-zero derivative stacks.
    pub fn with_zero_derivatives(
        dims: &ModelDims,
        f: DMatrix<f64>,
        g: DMatrix<f64>,
        h: DVector<f64>,
        q: DMatrix<f64>,
        r: f64,
    ) -> Self {
        let p = dims.param_dim;
        Self {
            f,
            g,
            h,
            q,
            r,
            df: vec![DMatrix::zeros(dims.state_dim, dims.state_dim); p],
            dg: vec![DMatrix::zeros(dims.state_dim, dims.noise_dim); p],
            dh: vec![DVector::zeros(dims.state_dim); p],
            dq: vec![DMatrix::zeros(dims.noise_dim, dims.noise_dim); p],
            dr: vec![0.0; p],
            d2: None,
        }
    }

    pub fn param_dim(&self) -> usize {
        self.df.len()
    }
}

/// Mean and covariance of the state before the first observation,
/// together with their derivative stacks.
#[derive(Clone, Debug)]
pub struct InitialCondition {
    pub x0: DVector<f64>,
    pub v0: DMatrix<f64>,
    pub dx0: Vec<DVector<f64>>,
    pub dv0: Vec<DMatrix<f64>>,
    pub d2x0: Option<Vec<DVector<f64>>>,
    pub d2v0: Option<Vec<DMatrix<f64>>>,
}

impl InitialCondition {
    /// Initial condition that does not depend on the parameters.
    pub fn constant(dims: &ModelDims, x0: DVector<f64>, v0: DMatrix<f64>) -> Self {
        let p = dims.param_dim;
        Self {
            x0,
            v0,
            dx0: vec![DVector::zeros(dims.state_dim); p],
            dv0: vec![DMatrix::zeros(dims.state_dim, dims.state_dim); p],
            d2x0: None,
            d2v0: None,
        }
    }

    /// Fills the second-derivative stacks with zeros, marking the initial
    /// condition as at most linear in the parameters.
    pub fn with_zero_second_derivatives(mut self, dims: &ModelDims) -> Self {
        let np = dims.pair_count();
        self.d2x0 = Some(vec![DVector::zeros(dims.state_dim); np]);
        self.d2v0 = Some(vec![DMatrix::zeros(dims.state_dim, dims.state_dim); np]);
        self
    }
}

/// Everything the filters need at one parameter point.
#[derive(Clone, Debug)]
pub struct Model {
    pub dims: ModelDims,
    pub mats: ModelMatrices,
    pub init: InitialCondition,
}

/// Maps an unconstrained parameter vector to a fully specified model.
///
/// Evaluation must be pure: repeated calls at the same `theta` produce
/// element-wise identical matrices. Implementations are expected to be
/// `Sync` so filter runs can share them across threads.
pub trait ModelProvider {
    fn dims(&self) -> ModelDims;

    /// Builds the matrices and initial condition at `theta`.
    /// `want_second` requests second-derivative stacks from providers
    /// that support them; others simply leave them absent.
    fn eval(&self, theta: &[f64], want_second: bool) -> Result<Model, ModelError>;

    /// Whether [`eval`](Self::eval) can supply second-derivative stacks.
    fn has_second_derivatives(&self) -> bool {
        false
    }

    /// Whether the innovation variance is concentrated out of the
    /// likelihood (ARMA). Changes the log-likelihood and gradient
    /// assembly in the filter drivers.
    fn concentrated_variance(&self) -> bool {
        false
    }
}

fn check_symmetric(m: &DMatrix<f64>, label: &str, report: &mut Vec<String>) {
    let scale = crate::linalg::max_abs(m).max(1.0);
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-10 * scale {
                report.push(format!("{label} not symmetric"));
                return;
            }
        }
    }
}

fn check_psd(m: &DMatrix<f64>, label: &str, report: &mut Vec<String>) {
    let scale = crate::linalg::max_abs(m).max(1.0);
    let eig = m.clone().symmetric_eigen();
    if eig.eigenvalues.iter().any(|&l| l < -1e-10 * scale) {
        report.push(format!("{label} not positive semidefinite"));
    }
}

/// Checks shapes, stack lengths, symmetry and positive-semidefiniteness
/// constraints. Returns one message per violated constraint; an empty
/// report means the model is well formed.
pub fn validate_model(
    mm: &ModelMatrices,
    ic: &InitialCondition,
    dims: &ModelDims,
) -> Vec<String> {
    let mut report = Vec::new();
    let (m, k, p) = (dims.state_dim, dims.noise_dim, dims.param_dim);

    if mm.f.shape() != (m, m) {
        report.push(format!("F has shape {:?}, expected ({m}, {m})", mm.f.shape()));
    }
    if mm.g.shape() != (m, k) {
        report.push(format!("G has shape {:?}, expected ({m}, {k})", mm.g.shape()));
    }
    if mm.h.len() != m {
        report.push(format!("H has length {}, expected {m}", mm.h.len()));
    }
    if mm.q.shape() != (k, k) {
        report.push(format!("Q has shape {:?}, expected ({k}, {k})", mm.q.shape()));
    }
    if ic.x0.len() != m {
        report.push(format!("x0 has length {}, expected {m}", ic.x0.len()));
    }
    if ic.v0.shape() != (m, m) {
        report.push(format!("V0 has shape {:?}, expected ({m}, {m})", ic.v0.shape()));
    }

    for (len, label) in [
        (mm.df.len(), "dF"),
        (mm.dg.len(), "dG"),
        (mm.dh.len(), "dH"),
        (mm.dq.len(), "dQ"),
        (mm.dr.len(), "dR"),
        (ic.dx0.len(), "dx0"),
        (ic.dv0.len(), "dV0"),
    ] {
        if len != p {
            report.push(format!(
                "derivative stack length mismatch: {label} has {len} entries, expected {p}"
            ));
        }
    }

    if mm.q.shape() == (k, k) {
        check_symmetric(&mm.q, "Q", &mut report);
        check_psd(&mm.q, "Q", &mut report);
    }
    if mm.r < 0.0 {
        report.push(format!("R = {} is negative", mm.r));
    }
    for (j, dq) in mm.dq.iter().enumerate() {
        if dq.shape() == (k, k) {
            check_symmetric(dq, &format!("dQ[{j}]"), &mut report);
        }
    }
    if ic.v0.shape() == (m, m) {
        check_symmetric(&ic.v0, "V0", &mut report);
        check_psd(&ic.v0, "V0", &mut report);
    }
    for (j, dv) in ic.dv0.iter().enumerate() {
        if dv.shape() == (m, m) {
            check_symmetric(dv, &format!("dV0[{j}]"), &mut report);
        }
    }

    let np = pair_count(p);
    if let Some(d2) = &mm.d2 {
        for (len, label) in [
            (d2.d2f.len(), "d2F"),
            (d2.d2g.len(), "d2G"),
            (d2.d2h.len(), "d2H"),
            (d2.d2q.len(), "d2Q"),
            (d2.d2r.len(), "d2R"),
        ] {
            if len != np {
                report.push(format!(
                    "derivative stack length mismatch: {label} has {len} entries, expected {np}"
                ));
            }
        }
    }
    if let Some(d2x0) = &ic.d2x0 {
        if d2x0.len() != np {
            report.push(format!(
                "derivative stack length mismatch: d2x0 has {} entries, expected {np}",
                d2x0.len()
            ));
        }
    }
    if let Some(d2v0) = &ic.d2v0 {
        if d2v0.len() != np {
            report.push(format!(
                "derivative stack length mismatch: d2V0 has {} entries, expected {np}",
                d2v0.len()
            ));
        }
    }

    report
}
