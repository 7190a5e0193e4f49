//! Small dense linear-algebra helpers shared across the filters.

use nalgebra::DMatrix;

/// Replaces `m` with its symmetric part `(m + mᵀ)/2` in place.
///
/// The filter recursions are exact in real arithmetic but drift in
/// floating point, and the derivative filters amplify any asymmetry.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    debug_assert_eq!(n, m.ncols());
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// Largest modulus among the eigenvalues of the companion matrix with
/// first row `coeffs` and a unit subdiagonal.
///
/// For AR coefficients this is the stationarity test (radius < 1), and
/// for MA coefficients the invertibility test.
pub fn companion_spectral_radius(coeffs: &[f64]) -> f64 {
    if coeffs.is_empty() {
        return 0.0;
    }
    let n = coeffs.len();
    let mut m = DMatrix::zeros(n, n);
    for (j, &c) in coeffs.iter().enumerate() {
        m[(0, j)] = c;
    }
    for i in 1..n {
        m[(i, i - 1)] = 1.0;
    }
    m.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// Symmetric PSD square root via eigendecomposition. Tiny negative
/// eigenvalues from roundoff are clamped to zero.
pub fn sym_psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    let mut root = DMatrix::zeros(m.nrows(), m.ncols());
    for (idx, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda > 0.0 {
            let col = eig.eigenvectors.column(idx);
            root += lambda.sqrt() * &col * col.transpose();
        }
    }
    root
}

/// Largest absolute entry.
pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |acc: f64, v| acc.max(v.abs()))
}

/// Compensated (Neumaier) summation accumulator. Keeps the two
/// likelihood sums deterministic and accurate over long series.
#[derive(Clone, Copy, Debug, Default)]
pub(crate) struct Kahan {
    sum: f64,
    comp: f64,
}

impl Kahan {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}
