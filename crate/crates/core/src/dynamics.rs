//! Drift fields and the diffusion generator.
//!
//! The exact drift is only Lipschitz across the hyperplane `e'x = 0`. The
//! mollified drift replaces `(e'x)^+` by a `C^1` quartic blend `rho_eps`
//! on `|e'x| <= eps`, which is what the Jacobian flows and the Bismut
//! estimator in [`crate::diagnostics`] differentiate.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::DiffusionParams;

fn check_eps(eps: f64) -> Result<()> {
    if eps > 0.0 && eps < 1.0 {
        Ok(())
    } else {
        Err(Error::BadEpsilon(eps))
    }
}

/// Smoothed positive part:
///
/// ```text
/// rho(y) = 0                                         y < -eps
///        = 3eps/16 - y^4/(16 eps^3) + 3y^2/(8eps) + y/2   |y| <= eps
///        = y                                         y > eps
/// ```
pub fn rho_eps(y: f64, eps: f64) -> Result<f64> {
    check_eps(eps)?;
    Ok(rho_unchecked(y, eps))
}

/// First derivative of [`rho_eps`]; takes values in `[0, 1]`.
pub fn rho_eps_dot(y: f64, eps: f64) -> Result<f64> {
    check_eps(eps)?;
    Ok(rho_dot_unchecked(y, eps))
}

#[inline]
pub(crate) fn rho_unchecked(y: f64, eps: f64) -> f64 {
    if y < -eps {
        0.0
    } else if y > eps {
        y
    } else {
        let y2 = y * y;
        3.0 * eps / 16.0 - y2 * y2 / (16.0 * eps * eps * eps) + 3.0 * y2 / (8.0 * eps) + 0.5 * y
    }
}

#[inline]
pub(crate) fn rho_dot_unchecked(y: f64, eps: f64) -> f64 {
    if y < -eps {
        0.0
    } else if y > eps {
        1.0
    } else {
        (-y * y * y / (4.0 * eps * eps * eps) + 3.0 * y / (4.0 * eps) + 0.5).clamp(0.0, 1.0)
    }
}

/// The drift with its kink smoothed over a band of half-width `epsilon`.
#[derive(Debug, Clone, Copy)]
pub struct MollifiedDrift<'a> {
    pub params: &'a DiffusionParams,
    pub epsilon: f64,
}

impl<'a> MollifiedDrift<'a> {
    pub fn new(params: &'a DiffusionParams, epsilon: f64) -> Result<Self> {
        check_eps(epsilon)?;
        Ok(MollifiedDrift { params, epsilon })
    }

    /// `g_eps(x) = -beta p - R x + rho_eps(e'x) (R - alpha I) p`.
    pub fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(x.len());
        self.drift_into(x.as_slice(), out.as_mut_slice());
        out
    }

    #[inline]
    pub fn drift_into(&self, x: &[f64], out: &mut [f64]) {
        let s: f64 = x.iter().sum();
        self.params.affine_drift_into(x, rho_unchecked(s, self.epsilon), out);
    }

    /// Kink weight `rho_dot(e'x)` multiplying `(R - alpha I) p e'` in the Jacobian.
    #[inline]
    pub fn kink_slope(&self, x: &[f64]) -> f64 {
        rho_dot_unchecked(x.iter().sum(), self.epsilon)
    }

    /// `grad g_eps(x) = -R + rho_dot(e'x) (R - alpha I) p e'`.
    pub fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let slope = self.kink_slope(x.as_slice());
        &self.params.drift_linear + self.params.kink_matrix() * slope
    }
}

/// A twice-differentiable test function with caller-supplied derivatives.
pub trait TestFunction {
    fn value(&self, x: &DVector<f64>) -> f64;
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64>;
    fn hessian(&self, x: &DVector<f64>) -> DMatrix<f64>;
}

/// Adapter turning three closures into a [`TestFunction`].
pub struct FnTriple<F, G, H> {
    pub value: F,
    pub gradient: G,
    pub hessian: H,
}

impl<F, G, H> TestFunction for FnTriple<F, G, H>
where
    F: Fn(&DVector<f64>) -> f64,
    G: Fn(&DVector<f64>) -> DVector<f64>,
    H: Fn(&DVector<f64>) -> DMatrix<f64>,
{
    fn value(&self, x: &DVector<f64>) -> f64 {
        (self.value)(x)
    }
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.gradient)(x)
    }
    fn hessian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        (self.hessian)(x)
    }
}

const HESSIAN_SYMMETRY_TOLERANCE: f64 = 1e-9;

/// Generator of the exact diffusion applied to `f` at `x`:
/// `<grad f, g(x)> + 1/2 <sigma sigma', hess f>_HS`.
pub fn generator_apply(params: &DiffusionParams, f: &dyn TestFunction, x: &DVector<f64>) -> Result<f64> {
    let hess = f.hessian(x);
    let asym = linalg::asymmetry(&hess);
    if asym > HESSIAN_SYMMETRY_TOLERANCE * hess.amax().max(1.0) {
        return Err(Error::AsymmetricHessian(asym));
    }
    let grad = f.gradient(x);
    Ok(grad.dot(&params.drift(x)) + 0.5 * params.sigma.component_mul(&hess).sum())
}
