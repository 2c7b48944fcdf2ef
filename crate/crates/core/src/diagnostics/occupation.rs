//! Weighted occupation time of the band `|e'x| <= eps`:
//!
//! ```text
//! L_t = int_0^t (1 - (e'X_s)^2 / eps^2) 1{|e'X_s| <= eps} ds.
//! ```

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::integrator::{replica_rng, EmChain};
use crate::model::DiffusionParams;

/// Integrand `(1 - y^2/eps^2) 1{|y| <= eps}`, in `[0, 1]`.
#[inline]
pub fn occupation_integrand(y: f64, eps: f64) -> f64 {
    if y.abs() <= eps {
        1.0 - y * y / (eps * eps)
    } else {
        0.0
    }
}

/// The `C^1` function whose second derivative is the occupation integrand:
///
/// ```text
/// phi_eps(y) = (2/3) eps y - eps^2/4       y > eps
///            = -y^4/(12 eps^2) + y^2/2     |y| <= eps
///            = -(2/3) eps y - eps^2/4      y < -eps
/// ```
///
/// Returns value, first and second derivative.
pub fn occupation_phi_eps(y: f64, eps: f64) -> Result<(f64, f64, f64)> {
    if !(eps > 0.0) {
        return Err(Error::BadEpsilon(eps));
    }
    let e2 = eps * eps;
    Ok(if y > eps {
        (2.0 / 3.0 * eps * y - e2 / 4.0, 2.0 / 3.0 * eps, 0.0)
    } else if y < -eps {
        (-2.0 / 3.0 * eps * y - e2 / 4.0, -2.0 / 3.0 * eps, 0.0)
    } else {
        let y2 = y * y;
        (-y2 * y2 / (12.0 * e2) + y2 / 2.0, -y2 * y / (3.0 * e2) + y, occupation_integrand(y, eps))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OccupationEstimate {
    pub epsilon: f64,
    pub t: f64,
    pub estimate: f64,
    pub std_error: f64,
    pub n_paths: usize,
}

/// `E L_t` from `n_paths` chains started at `x`, by the step sum
/// `eta sum_{k<n} integrand(e'X_k)`.
pub fn occupation_time(
    params: &DiffusionParams,
    x: &[f64],
    t: f64,
    eps: f64,
    n_paths: usize,
    eta: f64,
    seed: u64,
) -> Result<OccupationEstimate> {
    Ok(occupation_sweep(params, x, t, &[eps], n_paths, eta, seed)?.remove(0))
}

/// [`occupation_time`] for several band widths on the same paths.
pub fn occupation_sweep(
    params: &DiffusionParams,
    x: &[f64],
    t: f64,
    eps: &[f64],
    n_paths: usize,
    eta: f64,
    seed: u64,
) -> Result<Vec<OccupationEstimate>> {
    if let Some(&bad) = eps.iter().find(|e| !(**e > 0.0)) {
        return Err(Error::BadEpsilon(bad));
    }
    if !(t > 0.0) {
        return Err(Error::BadInterval { s: 0.0, t });
    }
    if !(eta > 0.0 && eta < 1.0) || n_paths < 2 {
        return Err(Error::InvalidConfig("need eta in (0, 1) and at least two paths".into()));
    }
    if x.len() != params.dim() {
        return Err(Error::DimensionMismatch { expected: params.dim(), got: x.len() });
    }
    let n = ((t / eta).round() as usize).max(1);
    let per_path: Vec<Vec<f64>> = (0..n_paths)
        .into_par_iter()
        .map(|i| {
            let mut chain = EmChain::new(params, params, eta, x, replica_rng(seed, i as u64));
            let mut acc = vec![0.0; eps.len()];
            for _ in 0..n {
                let s: f64 = chain.state().iter().sum();
                for (a, &e) in acc.iter_mut().zip(eps) {
                    *a += occupation_integrand(s, e);
                }
                chain.step()?;
            }
            Ok(acc.into_iter().map(|a| a * eta).collect())
        })
        .collect::<Result<_>>()?;
    let m = n_paths as f64;
    Ok(eps
        .iter()
        .enumerate()
        .map(|(j, &e)| {
            let mean = per_path.iter().map(|v| v[j]).sum::<f64>() / m;
            let var = per_path.iter().map(|v| (v[j] - mean).powi(2)).sum::<f64>() / (m - 1.0);
            OccupationEstimate { epsilon: e, t, estimate: mean, std_error: (var / m).sqrt(), n_paths }
        })
        .collect())
}
