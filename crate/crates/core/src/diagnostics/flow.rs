//! Jacobian flows of the mollified chain and the Bismut gradient estimator
//!
//! ```text
//! grad_u E psi(X_t) = E[ psi(X_t) (1/t) sum_k <sigma^{-1} J_k u, dB_k> ].
//! ```

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::dynamics::MollifiedDrift;
use crate::ergodic::Observable;
use crate::error::{Error, Result};
use crate::integrator::{replica_rng, EmChain};
use crate::model::DiffusionParams;

/// Per-step factor of the flow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlowMode {
    /// `exp(eta grad g_eps(X_k))`.
    Exponential,
    /// `I + eta grad g_eps(X_k)`; the exact tangent of the discrete chain.
    Euler,
}

/// A recorded path of the mollified chain, `states[k]` at time `k eta`.
#[derive(Debug, Clone)]
pub struct MollifiedPath {
    pub eta: f64,
    pub epsilon: f64,
    pub states: Vec<DVector<f64>>,
}

pub fn simulate_mollified_path(
    params: &DiffusionParams,
    epsilon: f64,
    x0: &[f64],
    eta: f64,
    n_steps: usize,
    seed: u64,
) -> Result<MollifiedPath> {
    let drift = MollifiedDrift::new(params, epsilon)?;
    let mut chain = EmChain::new(&drift, params, eta, x0, replica_rng(seed, 0));
    let mut states = Vec::with_capacity(n_steps + 1);
    states.push(DVector::from_column_slice(x0));
    for _ in 0..n_steps {
        chain.step()?;
        states.push(DVector::from_column_slice(chain.state()));
    }
    Ok(MollifiedPath { eta, epsilon, states })
}

/// Step factors for the two saturated kink slopes, reused across steps.
struct Factors {
    below: DMatrix<f64>,
    above: DMatrix<f64>,
}

fn step_factor(drift: &MollifiedDrift<'_>, x: &DVector<f64>, eta: f64, mode: FlowMode, cache: &Factors) -> DMatrix<f64> {
    let slope = drift.kink_slope(x.as_slice());
    match (mode, slope) {
        (FlowMode::Exponential, s) if s == 0.0 => cache.below.clone(),
        (FlowMode::Exponential, s) if s == 1.0 => cache.above.clone(),
        (FlowMode::Exponential, _) => (drift.jacobian(x) * eta).exp(),
        (FlowMode::Euler, _) => DMatrix::identity(x.len(), x.len()) + drift.jacobian(x) * eta,
    }
}

/// Time-ordered flow `J_{s,t} = F_{k1-1} ... F_{k0}` along `path`, with
/// `k0 = round(s / eta)` and `k1 = round(t / eta)`.
pub fn jacobian_flow(params: &DiffusionParams, path: &MollifiedPath, s: f64, t: f64, mode: FlowMode) -> Result<DMatrix<f64>> {
    let eta = path.eta;
    let horizon = (path.states.len() - 1) as f64 * eta;
    if !(0.0 <= s && s <= t && t <= horizon * (1.0 + 1e-12)) {
        return Err(Error::BadInterval { s, t });
    }
    let drift = MollifiedDrift::new(params, path.epsilon)?;
    let d = params.dim();
    let cache = Factors {
        below: (&params.drift_linear * eta).exp(),
        above: ((&params.drift_linear + params.kink_matrix()) * eta).exp(),
    };
    let k0 = (s / eta).round() as usize;
    let k1 = ((t / eta).round() as usize).min(path.states.len() - 1);
    let mut j = DMatrix::identity(d, d);
    for x in &path.states[k0..k1] {
        j = step_factor(&drift, x, eta, mode, &cache) * j;
    }
    Ok(j)
}

/// Common settings for the gradient estimators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradientConfig {
    pub epsilon: f64,
    pub t: f64,
    pub eta: f64,
    pub n_paths: usize,
    pub seed: u64,
    pub mode: FlowMode,
}

impl GradientConfig {
    fn steps(&self) -> Result<usize> {
        if !(self.t > 0.0) {
            return Err(Error::BadInterval { s: 0.0, t: self.t });
        }
        if !(self.eta > 0.0 && self.eta < 1.0) || self.n_paths < 2 {
            return Err(Error::InvalidConfig("need eta in (0, 1) and at least two paths".into()));
        }
        Ok(((self.t / self.eta).round() as usize).max(1))
    }
}

/// Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradientEstimate {
    pub estimate: f64,
    pub std_error: f64,
    pub n_paths: usize,
}

fn summarize(values: &[f64]) -> GradientEstimate {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    GradientEstimate { estimate: mean, std_error: (var / n).sqrt(), n_paths: values.len() }
}

/// Bismut estimate of `grad_u E psi(X_t^x)` for the mollified chain.
///
/// The weight `(1/t) sum_k <sigma^{-1} v_{k+1}, sqrt(eta) xi_k>` uses the
/// same normals `xi_k` that drive the path, with the tangent
/// `v_{k+1} = F_k v_k` known before step `k` is taken. With
/// [`FlowMode::Euler`] the estimator is unbiased for the discrete chain.
pub fn bismut_gradient(
    params: &DiffusionParams,
    cfg: &GradientConfig,
    psi: &Observable,
    x: &[f64],
    u: &[f64],
) -> Result<GradientEstimate> {
    let n = cfg.steps()?;
    let d = params.dim();
    if x.len() != d || u.len() != d {
        return Err(Error::DimensionMismatch { expected: d, got: x.len().max(u.len()) });
    }
    psi.check_dim(d)?;
    let drift = MollifiedDrift::new(params, cfg.epsilon)?;
    let cache = Factors {
        below: (&params.drift_linear * cfg.eta).exp(),
        above: ((&params.drift_linear + params.kink_matrix()) * cfg.eta).exp(),
    };
    let t_eff = n as f64 * cfg.eta;
    let sqrt_eta = cfg.eta.sqrt();
    let values: Vec<f64> = (0..cfg.n_paths)
        .into_par_iter()
        .map(|i| {
            let mut chain = EmChain::new(&drift, params, cfg.eta, x, replica_rng(cfg.seed, i as u64));
            let mut v = DVector::from_column_slice(u);
            let mut integral = 0.0;
            for _ in 0..n {
                let state = DVector::from_column_slice(chain.state());
                v = step_factor(&drift, &state, cfg.eta, cfg.mode, &cache) * v;
                let a = &params.sigma_factor_inv * &v;
                let xi = chain.step()?;
                integral += sqrt_eta * a.iter().zip(xi).map(|(a, z)| a * z).sum::<f64>();
            }
            Ok(psi.eval(chain.state()) * integral / t_eff)
        })
        .collect::<Result<_>>()?;
    Ok(summarize(&values))
}

/// Central difference `(E psi(X_t^{x+hu}) - E psi(X_t^{x-hu})) / 2h` with
/// common random numbers (path `i` uses the same stream from both starts).
pub fn finite_difference_gradient(
    params: &DiffusionParams,
    cfg: &GradientConfig,
    psi: &Observable,
    x: &[f64],
    u: &[f64],
    h: f64,
) -> Result<GradientEstimate> {
    let n = cfg.steps()?;
    let d = params.dim();
    if x.len() != d || u.len() != d {
        return Err(Error::DimensionMismatch { expected: d, got: x.len().max(u.len()) });
    }
    let drift = MollifiedDrift::new(params, cfg.epsilon)?;
    let plus: Vec<f64> = x.iter().zip(u).map(|(x, u)| x + h * u).collect();
    let minus: Vec<f64> = x.iter().zip(u).map(|(x, u)| x - h * u).collect();
    let values: Vec<f64> = (0..cfg.n_paths)
        .into_par_iter()
        .map(|i| {
            let end = |start: &[f64]| -> Result<f64> {
                let mut chain = EmChain::new(&drift, params, cfg.eta, start, replica_rng(cfg.seed, i as u64));
                for _ in 0..n {
                    chain.step()?;
                }
                Ok(psi.eval(chain.state()))
            };
            Ok((end(&plus)? - end(&minus)?) / (2.0 * h))
        })
        .collect::<Result<_>>()?;
    Ok(summarize(&values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{derive_params, PhaseTypeModel};
    use approx::assert_relative_eq;

    #[test]
    fn flow_over_empty_interval_is_identity() {
        let params = derive_params(&PhaseTypeModel::single_phase(0.5, 1.0, 1.0), false).unwrap();
        let path = simulate_mollified_path(&params, 0.1, &[0.0], 0.01, 100, 3).unwrap();
        let j = jacobian_flow(&params, &path, 0.4, 0.4, FlowMode::Exponential).unwrap();
        assert_eq!(j, DMatrix::identity(1, 1));
        assert!(matches!(
            jacobian_flow(&params, &path, 0.5, 0.4, FlowMode::Euler),
            Err(Error::BadInterval { .. })
        ));
        assert!(matches!(
            jacobian_flow(&params, &path, 0.0, 2.0, FlowMode::Euler),
            Err(Error::BadInterval { .. })
        ));
    }

    #[test]
    fn linear_regime_flow_is_exponential() {
        // alpha = 1 removes the kink for d = 1 (R = 1).
        let params = derive_params(&PhaseTypeModel::single_phase(1.0, 0.5, 1.0), false).unwrap();
        let path = simulate_mollified_path(&params, 0.1, &[0.2], 0.01, 300, 4).unwrap();
        let j = jacobian_flow(&params, &path, 0.5, 2.5, FlowMode::Exponential).unwrap();
        assert_relative_eq!(j[(0, 0)], (-2.0f64).exp(), epsilon = 1e-12);
    }

    #[test]
    fn zero_direction_gives_zero() {
        let params = derive_params(&PhaseTypeModel::single_phase(0.5, 1.0, 1.0), false).unwrap();
        let cfg = GradientConfig { epsilon: 0.1, t: 0.2, eta: 0.01, n_paths: 16, seed: 1, mode: FlowMode::Euler };
        let g = bismut_gradient(&params, &cfg, &Observable::TanhSum, &[0.0], &[0.0]).unwrap();
        assert_eq!(g.estimate, 0.0);
    }
}
