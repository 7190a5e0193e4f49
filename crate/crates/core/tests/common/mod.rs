//! Shared fixtures for the integration tests: parameterized model
//! families with known exact derivatives, series generators and
//! comparison helpers.
#![allow(dead_code)] // not every test target uses every fixture

use nalgebra::{DMatrix, DVector};
use ssmgrad::statespace::{
    pair_index, InitialCondition, Model, ModelDims, ModelMatrices, ModelProvider, SecondDerivs,
};
use ssmgrad::ModelError;

/// Relative difference with a zero-safe denominator.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-9 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    values[values.len() / 2]
}

/// Dense family with every matrix affine in θ, so all first-derivative
/// stacks are exact constants and all second derivatives vanish. This
/// exercises the dF, dG, dH, dQ, dR, dx0 and dV0 code paths at once.
pub struct AffineFamily {
    pub state_dim: usize,
    pub noise_dim: usize,
    pub f0: DMatrix<f64>,
    pub fj: Vec<DMatrix<f64>>,
    pub g0: DMatrix<f64>,
    pub gj: Vec<DMatrix<f64>>,
    pub h0: DVector<f64>,
    pub hj: Vec<DVector<f64>>,
    pub q0: DMatrix<f64>,
    pub qj: Vec<DMatrix<f64>>,
    pub r0: f64,
    pub rj: Vec<f64>,
    pub x00: DVector<f64>,
    pub x0j: Vec<DVector<f64>>,
    pub v00: DMatrix<f64>,
    pub v0j: Vec<DMatrix<f64>>,
}

impl AffineFamily {
    /// A fixed, well-conditioned 3-state, 2-noise, 2-parameter instance.
    pub fn dense_3x2() -> Self {
        let sym = |m: DMatrix<f64>| (&m + &m.transpose()) * 0.5;
        Self {
            state_dim: 3,
            noise_dim: 2,
            f0: DMatrix::from_row_slice(3, 3, &[0.8, -0.2, 0.1, 0.3, 0.5, -0.1, 0.0, 0.2, 0.6]),
            fj: vec![
                DMatrix::from_row_slice(3, 3, &[0.1, 0.0, -0.2, 0.05, 0.0, 0.1, 0.0, -0.1, 0.0]),
                DMatrix::from_row_slice(3, 3, &[0.0, 0.2, 0.0, -0.1, 0.05, 0.0, 0.1, 0.0, -0.05]),
            ],
            g0: DMatrix::from_row_slice(3, 2, &[1.0, 0.0, -0.4, 1.0, 0.2, 0.3]),
            gj: vec![
                DMatrix::from_row_slice(3, 2, &[0.1, -0.1, 0.0, 0.2, 0.05, 0.0]),
                DMatrix::from_row_slice(3, 2, &[0.0, 0.1, -0.2, 0.0, 0.0, 0.15]),
            ],
            h0: DVector::from_row_slice(&[1.0, 0.5, -0.25]),
            hj: vec![
                DVector::from_row_slice(&[0.1, 0.0, 0.2]),
                DVector::from_row_slice(&[-0.05, 0.15, 0.0]),
            ],
            q0: sym(DMatrix::from_row_slice(2, 2, &[1.5, 0.2, 0.2, 0.9])),
            qj: vec![
                sym(DMatrix::from_row_slice(2, 2, &[0.2, 0.05, 0.05, 0.0])),
                sym(DMatrix::from_row_slice(2, 2, &[0.0, -0.1, -0.1, 0.3])),
            ],
            r0: 0.8,
            rj: vec![0.1, -0.05],
            x00: DVector::from_row_slice(&[0.5, -1.0, 0.25]),
            x0j: vec![
                DVector::from_row_slice(&[0.3, 0.0, -0.2]),
                DVector::from_row_slice(&[0.0, 0.4, 0.1]),
            ],
            v00: DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.1, 0.3, 1.5, -0.2, 0.1, -0.2, 1.8]),
            v0j: vec![
                sym(DMatrix::from_row_slice(3, 3, &[0.2, 0.1, 0.0, 0.1, 0.0, 0.05, 0.0, 0.05, 0.1])),
                sym(DMatrix::from_row_slice(3, 3, &[0.0, -0.1, 0.05, -0.1, 0.3, 0.0, 0.05, 0.0, 0.0])),
            ],
        }
    }

    pub fn param_dim(&self) -> usize {
        self.fj.len()
    }
}

impl ModelProvider for AffineFamily {
    fn dims(&self) -> ModelDims {
        ModelDims::new(self.state_dim, self.noise_dim, self.param_dim())
    }

    fn eval(&self, theta: &[f64], want_second: bool) -> Result<Model, ModelError> {
        let dims = self.dims();
        let p = dims.param_dim;
        assert_eq!(theta.len(), p);
        let mut f = self.f0.clone();
        let mut g = self.g0.clone();
        let mut h = self.h0.clone();
        let mut q = self.q0.clone();
        let mut r = self.r0;
        let mut x0 = self.x00.clone();
        let mut v0 = self.v00.clone();
        for j in 0..p {
            f += theta[j] * &self.fj[j];
            g += theta[j] * &self.gj[j];
            h += theta[j] * &self.hj[j];
            q += theta[j] * &self.qj[j];
            r += theta[j] * self.rj[j];
            x0 += theta[j] * &self.x0j[j];
            v0 += theta[j] * &self.v0j[j];
        }
        let mut mm = ModelMatrices::with_zero_derivatives(&dims, f, g, h, q, r);
        mm.df = self.fj.clone();
        mm.dg = self.gj.clone();
        mm.dh = self.hj.clone();
        mm.dq = self.qj.clone();
        mm.dr = self.rj.clone();
        if want_second {
            mm.d2 = Some(SecondDerivs::zeros(&dims));
        }
        let mut init = InitialCondition::constant(&dims, x0, v0);
        init.dx0 = self.x0j.clone();
        init.dv0 = self.v0j.clone();
        let init = init.with_zero_second_derivatives(&dims);
        Ok(Model { dims, mats: mm, init })
    }

    fn has_second_derivatives(&self) -> bool {
        true
    }
}

/// Two-parameter family with genuinely non-zero second derivatives:
/// `F = F0 + θ₀ F1 + θ₀² F2`, `H = H0 + θ₀ H1`, `Q = Q0 + e^{θ₁} Q1`,
/// `R = R0 + θ₁² R2`.
pub struct CurvedFamily {
    pub f0: DMatrix<f64>,
    pub f1: DMatrix<f64>,
    pub f2: DMatrix<f64>,
    pub h0: DVector<f64>,
    pub h1: DVector<f64>,
    pub q0: DMatrix<f64>,
    pub q1: DMatrix<f64>,
    pub r0: f64,
    pub r2: f64,
    pub g: DMatrix<f64>,
    pub x0: DVector<f64>,
    pub v0: DMatrix<f64>,
}

impl CurvedFamily {
    pub fn standard() -> Self {
        Self {
            f0: DMatrix::from_row_slice(2, 2, &[0.7, -0.1, 0.2, 0.5]),
            f1: DMatrix::from_row_slice(2, 2, &[0.1, 0.05, 0.0, -0.1]),
            f2: DMatrix::from_row_slice(2, 2, &[0.02, 0.0, -0.03, 0.01]),
            h0: DVector::from_row_slice(&[1.0, 0.3]),
            h1: DVector::from_row_slice(&[0.2, -0.1]),
            q0: DMatrix::from_row_slice(2, 2, &[0.6, 0.1, 0.1, 0.8]),
            q1: DMatrix::from_row_slice(2, 2, &[0.3, 0.05, 0.05, 0.2]),
            r0: 0.5,
            r2: 0.15,
            g: DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.2, 1.0]),
            x0: DVector::from_row_slice(&[0.4, -0.3]),
            v0: DMatrix::from_row_slice(2, 2, &[1.2, 0.2, 0.2, 0.9]),
        }
    }
}

impl ModelProvider for CurvedFamily {
    fn dims(&self) -> ModelDims {
        ModelDims::new(2, 2, 2)
    }

    fn eval(&self, theta: &[f64], want_second: bool) -> Result<Model, ModelError> {
        let dims = self.dims();
        let (t0, t1) = (theta[0], theta[1]);
        let f = &self.f0 + t0 * &self.f1 + t0 * t0 * &self.f2;
        let h = &self.h0 + t0 * &self.h1;
        let q = &self.q0 + t1.exp() * &self.q1;
        let r = self.r0 + t1 * t1 * self.r2;
        let mut mm = ModelMatrices::with_zero_derivatives(&dims, f, self.g.clone(), h, q, r);
        mm.df[0] = &self.f1 + 2.0 * t0 * &self.f2;
        mm.dh[0] = self.h1.clone();
        mm.dq[1] = t1.exp() * &self.q1;
        mm.dr[1] = 2.0 * t1 * self.r2;
        if want_second {
            let mut d2 = SecondDerivs::zeros(&dims);
            d2.d2f[pair_index(0, 0, 2)] = 2.0 * &self.f2;
            d2.d2q[pair_index(1, 1, 2)] = t1.exp() * &self.q1;
            d2.d2r[pair_index(1, 1, 2)] = 2.0 * self.r2;
            mm.d2 = Some(d2);
        }
        let init = InitialCondition::constant(&dims, self.x0.clone(), self.v0.clone())
            .with_zero_second_derivatives(&dims);
        Ok(Model { dims, mats: mm, init })
    }

    fn has_second_derivatives(&self) -> bool {
        true
    }
}

/// A deterministic synthetic observation series that is not white noise.
pub fn wavy_series(n: usize) -> Vec<f64> {
    (0..n)
        .map(|t| {
            let t = t as f64;
            (0.3 * t).sin() + 0.5 * (0.07 * t).cos() + 0.1 * (t * 0.618).sin()
        })
        .collect()
}
