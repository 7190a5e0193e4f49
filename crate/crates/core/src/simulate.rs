//! Draws synthetic series from a state-space model.

use nalgebra::DVector;
use rand::rngs::StdRng;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::ModelError;
use crate::linalg::sym_psd_sqrt;
use crate::statespace::ModelProvider;

/// A simulated path: the latent states and the observations.
#[derive(Clone, Debug)]
pub struct SimulatedSeries {
    pub states: Vec<DVector<f64>>,
    pub observations: Vec<f64>,
}

/// Simulates `n` observations at `theta`, deterministic for a fixed
/// seed. The initial state is drawn from `N(x₀, V₀)` and the recursion
/// `x ← F x + G v`, `y = H x + w` is iterated with fresh Gaussian noise.
pub fn simulate(
    provider: &dyn ModelProvider,
    theta: &[f64],
    n: usize,
    seed: u64,
) -> Result<SimulatedSeries, ModelError> {
    let model = provider.eval(theta, false)?;
    let mut rng = StdRng::seed_from_u64(seed);
    fn draw(rng: &mut StdRng, len: usize) -> DVector<f64> {
        DVector::from_fn(len, |_, _| StandardNormal.sample(rng))
    }

    let v0_root = sym_psd_sqrt(&model.init.v0);
    let q_root = sym_psd_sqrt(&model.mats.q);
    let r_std = model.mats.r.sqrt();
    let state_dim = model.dims.state_dim;
    let noise_dim = model.dims.noise_dim;

    let mut x = &model.init.x0 + &v0_root * draw(&mut rng, state_dim);
    let mut states = Vec::with_capacity(n);
    let mut observations = Vec::with_capacity(n);
    for _ in 0..n {
        x = &model.mats.f * &x + &model.mats.g * (&q_root * draw(&mut rng, noise_dim));
        let w: f64 = StandardNormal.sample(&mut rng);
        observations.push(model.mats.h.dot(&x) + r_std * w);
        states.push(x.clone());
    }
    Ok(SimulatedSeries {
        states,
        observations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arma::{ArmaProvider, ArmaSpec};
    use crate::seasonal::{SeasonalProvider, SeasonalSpec};
    use approx::assert_relative_eq;

    #[test]
    fn same_seed_same_path() {
        let provider = ArmaProvider::with_fixed_sigma2(ArmaSpec::raw(1, 0), 1.0);
        let a = simulate(&provider, &[0.5], 200, 7).unwrap();
        let b = simulate(&provider, &[0.5], 200, 7).unwrap();
        assert_eq!(a.observations, b.observations);
        let c = simulate(&provider, &[0.5], 200, 8).unwrap();
        assert_ne!(a.observations, c.observations);
    }

    #[test]
    fn ar1_lag_one_autocorrelation() {
        let provider = ArmaProvider::with_fixed_sigma2(ArmaSpec::raw(1, 0), 1.0);
        let sim = simulate(&provider, &[0.5], 1_000_000, 11).unwrap();
        let y = &sim.observations;
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        let var: f64 = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
        let cov: f64 = y
            .windows(2)
            .map(|w| (w[0] - mean) * (w[1] - mean))
            .sum::<f64>();
        let rho = cov / var;
        assert_relative_eq!(rho, 0.5, epsilon = 5e-3);
    }

    #[test]
    fn noise_free_seasonal_component_is_periodic() {
        // τ₂² = 0 (θ₂ = −∞) switches the seasonal noise off, so the
        // seasonal block of the state repeats exactly with the period.
        let period = 4;
        let provider = SeasonalProvider::new(SeasonalSpec::new(period, 0));
        let theta = [-2.0, f64::NEG_INFINITY, -1.0];
        let sim = simulate(&provider, &theta, 60, 3).unwrap();
        for t in period..sim.states.len() {
            let now = sim.states[t][2];
            let before = sim.states[t - period][2];
            assert_relative_eq!(now, before, epsilon = 1e-9, max_relative = 1e-9);
        }
    }

    #[test]
    fn nonstationary_raw_arma_is_rejected() {
        let provider = ArmaProvider::with_fixed_sigma2(ArmaSpec::raw(1, 0), 1.0);
        assert!(simulate(&provider, &[1.2], 10, 0).is_err());
    }
}
