//! End-to-end estimation: simulate, fit with BFGS, and check parameter
//! recovery, monotone ascent, optimality and the Hessian at the optimum.

mod common;

use common::rel_err;
use nalgebra::DMatrix;
use ssmgrad::arma::{transform_arma_params, ArmaProvider, ArmaSpec};
use ssmgrad::hessfilter::run_hessian_filter;
use ssmgrad::optimize::{bfgs_maximize, GradientSource, OptimizerConfig};
use ssmgrad::seasonal::{SeasonalProvider, SeasonalSpec};
use ssmgrad::simulate::simulate;
use ssmgrad::ModelProvider;

/// Maps raw ARMA coefficients to the transformed coordinates that make
/// them the image of the PARCOR chain (inverse of the transform path).
fn raw_to_transformed(a: &[f64], b: &[f64], bound: f64) -> Vec<f64> {
    fn ar_to_parcor(coefs: &[f64]) -> Vec<f64> {
        let order = coefs.len();
        let mut beta = vec![0.0; order];
        let mut cur = coefs.to_vec();
        for m in (1..=order).rev() {
            let bm = cur[m - 1];
            beta[m - 1] = bm;
            let prev = cur.clone();
            for j in 1..m {
                cur[j - 1] = (prev[j - 1] + bm * prev[m - 1 - j]) / (1.0 - bm * bm);
            }
        }
        beta
    }
    let to_theta = |coefs: &[f64]| -> Vec<f64> {
        ar_to_parcor(coefs)
            .iter()
            .map(|&beta| 2.0 * (beta / bound).atanh())
            .collect()
    };
    let mut theta = to_theta(a);
    theta.extend(to_theta(b));
    theta
}

#[test]
fn transform_round_trips_through_the_inverse() {
    let (a_true, b_true) = (vec![1.41, -0.68], vec![0.34]);
    let theta = raw_to_transformed(&a_true, &b_true, 0.99);
    let (a, b, _) = transform_arma_params(&theta, 2, 0.99);
    for (x, y) in a.iter().zip(&a_true) {
        assert!(rel_err(*x, *y) < 1e-12);
    }
    for (x, y) in b.iter().zip(&b_true) {
        assert!(rel_err(*x, *y) < 1e-12);
    }
}

#[test]
fn simulated_arma21_is_recovered() {
    let spec = ArmaSpec::new(2, 1);
    let truth_raw = ArmaProvider::with_fixed_sigma2(ArmaSpec::raw(2, 1), 1.0);
    let ys = simulate(&truth_raw, &[1.41, -0.68, 0.34], 2000, 21)
        .unwrap()
        .observations;

    let provider = ArmaProvider::new(spec);
    let result = bfgs_maximize(
        &provider,
        &[0.0, 0.0, 0.0],
        &ys,
        &OptimizerConfig::default(),
    )
    .unwrap();
    assert!(result.converged, "gradient max {}", result.gradient.amax());
    let coeffs = provider.coefficients(&result.theta_hat).unwrap();
    assert!((coeffs.a[0] - 1.41).abs() < 0.1, "a1 = {}", coeffs.a[0]);
    assert!((coeffs.a[1] + 0.68).abs() < 0.1, "a2 = {}", coeffs.a[1]);
    assert!((coeffs.b[0] - 0.34).abs() < 0.1, "b1 = {}", coeffs.b[0]);

    // First-order optimality of the analytic gradient at the optimum.
    assert!(result.gradient.amax() < 1e-6);
    // AIC counts the concentrated variance as an estimated parameter.
    assert!(rel_err(result.aic, -2.0 * result.loglik + 8.0) < 1e-12);
}

#[test]
fn sigma2_hat_is_consistent() {
    // Known σ² = 0.25, long series: σ̂² recovered within ±10%.
    let truth = ArmaProvider::with_fixed_sigma2(ArmaSpec::raw(2, 1), 0.25);
    let ys = simulate(&truth, &[1.41, -0.68, 0.34], 5000, 33)
        .unwrap()
        .observations;
    let provider = ArmaProvider::new(ArmaSpec::new(2, 1));
    let result = bfgs_maximize(&provider, &[0.0; 3], &ys, &OptimizerConfig::default()).unwrap();
    assert!(result.converged);
    let report = ssmgrad::run_filter(&provider, &result.theta_hat, &ys).unwrap();
    let s2 = report.sigma2_hat.unwrap();
    assert!((s2 - 0.25).abs() / 0.25 < 0.1, "sigma2_hat = {s2}");
}

#[test]
fn seasonal_fit_ascends_monotonically_from_default_start() {
    let provider = SeasonalProvider::new(SeasonalSpec::new(12, 0));
    let ys = simulate(&provider, &[-3.0, -5.0, -1.0], 155, 55)
        .unwrap()
        .observations;
    let theta0 = [-12.20607265, -13.81551056, -0.69314718];
    let cfg = OptimizerConfig {
        max_iter: 300,
        ..OptimizerConfig::default()
    };
    let result = bfgs_maximize(&provider, &theta0, &ys, &cfg).unwrap();
    // Strictly increasing up to terminal tie steps at float resolution.
    let mut prev = f64::NEG_INFINITY;
    for rec in &result.iterations {
        let tie = 4.0 * f64::EPSILON * prev.abs().max(1.0);
        assert!(
            rec.loglik > prev - tie,
            "log-likelihood fell at iteration {}: {} after {}",
            rec.iter,
            rec.loglik,
            prev
        );
        prev = rec.loglik;
    }
    assert!(!result.iterations.is_empty());
    let first = result.iterations.first().unwrap().loglik;
    assert!(result.loglik >= first);
}

#[test]
fn hessian_at_optimum_is_negative_semidefinite() {
    let provider = SeasonalProvider::new(SeasonalSpec::new(4, 0));
    let ys = simulate(&provider, &[-2.0, -4.0, -0.5], 200, 77)
        .unwrap()
        .observations;
    let result = bfgs_maximize(
        &provider,
        &[-1.0, -1.0, -1.0],
        &ys,
        &OptimizerConfig::default(),
    )
    .unwrap();
    assert!(result.converged);
    let hess = run_hessian_filter(&provider, &result.theta_hat, &ys)
        .unwrap()
        .hessian
        .unwrap();
    let eig = hess.symmetric_eigen();
    let max_ev = eig.eigenvalues.iter().cloned().fold(f64::MIN, f64::max);
    let min_ev = eig.eigenvalues.iter().cloned().fold(f64::MAX, f64::min);
    assert!(
        max_ev < 1e-6 * min_ev.abs(),
        "eigenvalues not all non-positive: max {max_ev}, min {min_ev}"
    );
}

#[test]
fn analytic_and_fd_fits_agree_and_pass_counts_differ() {
    let provider = ArmaProvider::new(ArmaSpec::new(1, 1));
    let truth = ArmaProvider::with_fixed_sigma2(ArmaSpec::raw(1, 1), 1.0);
    let ys = simulate(&truth, &[0.7, 0.3], 500, 91).unwrap().observations;

    let analytic = bfgs_maximize(&provider, &[0.0, 0.0], &ys, &OptimizerConfig::default()).unwrap();
    let fd_cfg = OptimizerConfig {
        gradient_source: GradientSource::FiniteDifference,
        ..OptimizerConfig::default()
    };
    let fd = bfgs_maximize(&provider, &[0.0, 0.0], &ys, &fd_cfg).unwrap();

    assert!(analytic.converged && fd.converged);
    for j in 0..2 {
        assert!(
            (analytic.theta_hat[j] - fd.theta_hat[j]).abs() < 1e-3,
            "theta[{j}] differs: {} vs {}",
            analytic.theta_hat[j],
            fd.theta_hat[j]
        );
    }

    // Cost accounting: one pass per analytic gradient, 2p per FD one.
    let p = 2u64;
    assert_eq!(
        analytic.n_filter_passes,
        analytic.n_gradient_evals + analytic.n_value_evals
    );
    assert_eq!(
        fd.n_filter_passes,
        2 * p * fd.n_gradient_evals + fd.n_value_evals
    );
    assert!(fd.n_filter_passes > analytic.n_filter_passes);
}

#[test]
fn delta_method_standard_errors_cover_the_truth() {
    // One long-run sanity check of the Hessian-based standard errors in
    // coefficient space (the acceptance suite repeats this over seeds).
    let spec = ArmaSpec::new(2, 1);
    let truth = ArmaProvider::with_fixed_sigma2(ArmaSpec::raw(2, 1), 1.0);
    let ys = simulate(&truth, &[1.41, -0.68, 0.34], 2000, 13)
        .unwrap()
        .observations;
    let provider = ArmaProvider::new(spec);
    let result = bfgs_maximize(&provider, &[0.0; 3], &ys, &OptimizerConfig::default()).unwrap();
    assert!(result.converged);

    let hess = run_hessian_filter(&provider, &result.theta_hat, &ys)
        .unwrap()
        .hessian
        .unwrap();
    let info = -hess;
    let cov_theta = info.try_inverse().expect("information matrix invertible");
    let jac = provider.coefficient_jacobian(&result.theta_hat);
    let cov_coef: DMatrix<f64> = &jac * cov_theta * jac.transpose();
    let coeffs = provider.coefficients(&result.theta_hat).unwrap();
    let estimates = [coeffs.a[0], coeffs.a[1], coeffs.b[0]];
    let truth_vals = [1.41, -0.68, 0.34];
    for j in 0..3 {
        let se = cov_coef[(j, j)].sqrt();
        assert!(se.is_finite() && se > 0.0);
        assert!(
            (estimates[j] - truth_vals[j]).abs() < 3.0 * se,
            "coefficient {j}: {} vs {} (se {se})",
            estimates[j],
            truth_vals[j]
        );
    }
}
