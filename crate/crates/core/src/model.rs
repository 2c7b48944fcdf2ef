//! Phase-type queue primitives and the diffusion they induce.
//!
//! A [`PhaseTypeModel`] holds the raw queue description: the routing matrix
//! `P` between service phases, phase service rates `v`, the initial-phase
//! distribution `p`, patience rate `alpha`, arrival slack `beta` and the
//! arrival variability `ca2`. [`derive_params`] turns it into the
//! coefficients of the limiting diffusion
//!
//! ```text
//! dX = g(X) dt + sigma dB,   g(x) = -beta p - R x + (R - alpha I) p (e'x)^+
//! ```
//!
//! with `R = (I - P') diag(v)`, `gamma = zeta R^{-1} p`, `1/zeta = e' R^{-1} p`
//! and the covariance `sigma sigma'` assembled from multinomial routing
//! covariances.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::linalg;

/// Tolerance on `zeta - 1` before the phase distribution counts as non-unit mean.
pub const ZETA_TOLERANCE: f64 = 1e-9;
/// Largest accepted condition number of `I - P`.
pub const MAX_ROUTING_CONDITION: f64 = 1e12;
/// Relative ellipticity threshold: `minEig > ELLIPTICITY_RELATIVE * trace / d`.
pub const ELLIPTICITY_RELATIVE: f64 = 1e-10;

const PROBABILITY_SLACK: f64 = 1e-12;
const DISTRIBUTION_SUM_TOLERANCE: f64 = 1e-9;

/// Raw queue primitives of a G/Ph/n+GI queue in the Halfin-Whitt regime.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseTypeModel {
    /// Sub-stochastic routing matrix between phases (zero diagonal).
    pub routing: DMatrix<f64>,
    /// Service rate of each phase.
    pub rates: DVector<f64>,
    /// Initial-phase distribution.
    pub initial: DVector<f64>,
    /// Patience (abandonment) rate.
    pub alpha: f64,
    /// Arrival slack relative to critical loading.
    pub beta: f64,
    /// Squared coefficient of variation of the arrival process.
    pub ca2: f64,
}

/// On-disk layout of a model file.
#[derive(Debug, Serialize, Deserialize)]
struct ModelDoc {
    d: usize,
    #[serde(rename = "P")]
    p_matrix: Vec<Vec<f64>>,
    v: Vec<f64>,
    p: Vec<f64>,
    alpha: f64,
    beta: f64,
    ca2: f64,
}

impl PhaseTypeModel {
    pub fn dim(&self) -> usize {
        self.rates.len()
    }

    /// The single-phase (exponential service) model: `P = [0]`, `v = [1]`,
    /// `p = [1]`. Its diffusion is one-dimensional with variance `ca2 + 1`.
    pub fn single_phase(alpha: f64, beta: f64, ca2: f64) -> Self {
        PhaseTypeModel {
            routing: DMatrix::zeros(1, 1),
            rates: DVector::from_element(1, 1.0),
            initial: DVector::from_element(1, 1.0),
            alpha,
            beta,
            ca2,
        }
    }

    /// Parses and validates a model JSON document. Errors carry the JSON
    /// path of the offending field.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| Error::InvalidModel {
            path: "$".into(),
            reason: format!("malformed JSON: {e}"),
        })?;
        Self::from_json_value(&value)
    }

    pub fn from_json_value(value: &Value) -> Result<Self> {
        let obj = value.as_object().ok_or_else(|| invalid("$", "expected an object"))?;
        for key in obj.keys() {
            if !["d", "P", "v", "p", "alpha", "beta", "ca2"].contains(&key.as_str()) {
                return Err(invalid(&format!("$.{key}"), "unknown field"));
            }
        }
        let field = |k: &str| obj.get(k).ok_or_else(|| invalid(&format!("$.{k}"), "missing field"));
        let d = field("d")?
            .as_u64()
            .filter(|&d| d >= 1)
            .ok_or_else(|| invalid("$.d", "expected a positive integer"))? as usize;

        let rows = field("P")?
            .as_array()
            .ok_or_else(|| invalid("$.P", "expected an array of rows"))?;
        if rows.len() != d {
            return Err(invalid("$.P", &format!("expected {d} rows, got {}", rows.len())));
        }
        let mut routing = DMatrix::zeros(d, d);
        for (i, row) in rows.iter().enumerate() {
            let row = number_array(row, &format!("$.P[{i}]"), d)?;
            for (j, x) in row.into_iter().enumerate() {
                routing[(i, j)] = x;
            }
        }
        let rates = DVector::from_vec(number_array(field("v")?, "$.v", d)?);
        let initial = DVector::from_vec(number_array(field("p")?, "$.p", d)?);
        let model = PhaseTypeModel {
            routing,
            rates,
            initial,
            alpha: number(field("alpha")?, "$.alpha")?,
            beta: number(field("beta")?, "$.beta")?,
            ca2: number(field("ca2")?, "$.ca2")?,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn to_json_string(&self) -> String {
        let d = self.dim();
        let doc = ModelDoc {
            d,
            p_matrix: (0..d).map(|i| self.routing.row(i).iter().copied().collect()).collect(),
            v: self.rates.iter().copied().collect(),
            p: self.initial.iter().copied().collect(),
            alpha: self.alpha,
            beta: self.beta,
            ca2: self.ca2,
        };
        serde_json::to_string_pretty(&doc).expect("model serialization is infallible")
    }

    /// Checks the structural invariants: zero-diagonal sub-stochastic `P`,
    /// positive rates, `p` a probability vector, `alpha > 0`, `ca2 > 0`.
    pub fn validate(&self) -> Result<()> {
        let d = self.rates.len();
        if d == 0 {
            return Err(invalid("$.d", "dimension must be at least 1"));
        }
        if self.routing.shape() != (d, d) {
            return Err(invalid("$.P", "routing matrix must be d x d"));
        }
        if self.initial.len() != d {
            return Err(invalid("$.p", "initial distribution must have length d"));
        }
        for i in 0..d {
            let mut row_sum = 0.0;
            for j in 0..d {
                let x = self.routing[(i, j)];
                let path = format!("$.P[{i}][{j}]");
                if !x.is_finite() || x < 0.0 {
                    return Err(invalid(&path, "routing probabilities must be finite and nonnegative"));
                }
                if i == j && x != 0.0 {
                    return Err(invalid(&path, "diagonal of P must be zero"));
                }
                row_sum += x;
            }
            if row_sum > 1.0 + PROBABILITY_SLACK {
                return Err(invalid(&format!("$.P[{i}]"), &format!("row sum {row_sum} exceeds 1")));
            }
        }
        for (i, &v) in self.rates.iter().enumerate() {
            if !(v.is_finite() && v > 0.0) {
                return Err(invalid(&format!("$.v[{i}]"), "service rates must be positive"));
            }
        }
        let mut total = 0.0;
        for (i, &p) in self.initial.iter().enumerate() {
            if !(p.is_finite() && p >= 0.0) {
                return Err(invalid(&format!("$.p[{i}]"), "probabilities must be nonnegative"));
            }
            total += p;
        }
        if (total - 1.0).abs() > DISTRIBUTION_SUM_TOLERANCE {
            return Err(invalid("$.p", &format!("entries sum to {total}, expected 1")));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(invalid("$.alpha", "patience rate must be positive"));
        }
        if !self.beta.is_finite() {
            return Err(invalid("$.beta", "slack must be finite"));
        }
        if !(self.ca2.is_finite() && self.ca2 > 0.0) {
            return Err(invalid("$.ca2", "arrival variability must be positive"));
        }
        Ok(())
    }
}

fn invalid(path: &str, reason: &str) -> Error {
    Error::InvalidModel { path: path.to_string(), reason: reason.to_string() }
}

fn number(v: &Value, path: &str) -> Result<f64> {
    v.as_f64().ok_or_else(|| invalid(path, "expected a number"))
}

fn number_array(v: &Value, path: &str, len: usize) -> Result<Vec<f64>> {
    let arr = v.as_array().ok_or_else(|| invalid(path, "expected an array"))?;
    if arr.len() != len {
        return Err(invalid(path, &format!("expected {len} entries, got {}", arr.len())));
    }
    arr.iter()
        .enumerate()
        .map(|(i, x)| number(x, &format!("{path}[{i}]")))
        .collect()
}

/// Coefficients of the limiting diffusion.
#[derive(Debug, Clone)]
pub struct DiffusionParams {
    /// The model actually used (service rates rescaled when normalization
    /// was requested).
    pub model: PhaseTypeModel,
    /// `R = (I - P') diag(v)`.
    pub r: DMatrix<f64>,
    pub zeta: f64,
    pub gamma: DVector<f64>,
    /// Covariance `sigma sigma'`.
    pub sigma: DMatrix<f64>,
    /// Symmetric positive-definite square root of `sigma`.
    pub sigma_factor: DMatrix<f64>,
    pub sigma_factor_inv: DMatrix<f64>,
    /// `-beta p`.
    pub drift_constant: DVector<f64>,
    /// `-R`.
    pub drift_linear: DMatrix<f64>,
    /// `(R - alpha I) p`.
    pub drift_kink: DVector<f64>,
    pub min_eig: f64,
    /// Whether the service rates were rescaled to force `zeta = 1`.
    pub normalized: bool,
}

/// Multinomial routing covariance `diag(q) - q q'` of a probability row.
///
/// Row `k` of `P` gives `H^(k)`; the initial distribution gives `H^(0)`.
pub fn multinomial_covariance(q: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_diagonal(q) - q * q.transpose()
}

fn solve_r_p(r: &DMatrix<f64>, p: &DVector<f64>) -> Result<DVector<f64>> {
    r.clone()
        .lu()
        .solve(p)
        .ok_or(Error::SingularRouting { condition: f64::INFINITY })
}

/// Derives the diffusion coefficients from validated queue primitives.
///
/// When `zeta` differs from 1 by more than [`ZETA_TOLERANCE`], the service
/// rates are rescaled by `v <- v / zeta` if `normalize` is set (this makes
/// the new `zeta` exactly 1); otherwise [`Error::NonUnitMeanPhase`] is
/// returned.
pub fn derive_params(model: &PhaseTypeModel, normalize: bool) -> Result<DiffusionParams> {
    model.validate()?;
    let d = model.dim();
    let eye = DMatrix::<f64>::identity(d, d);
    let i_minus_p = &eye - &model.routing;
    let condition = linalg::condition_number(&i_minus_p);
    if !(condition <= MAX_ROUTING_CONDITION) {
        return Err(Error::SingularRouting { condition });
    }
    let i_minus_pt = i_minus_p.transpose();
    let p = &model.initial;

    let mut model = model.clone();
    let mut r = &i_minus_pt * DMatrix::from_diagonal(&model.rates);
    let mut r_inv_p = solve_r_p(&r, p)?;
    let mut zeta = 1.0 / r_inv_p.sum();
    let mut normalized = false;
    if (zeta - 1.0).abs() > ZETA_TOLERANCE {
        if !normalize {
            return Err(Error::NonUnitMeanPhase { zeta });
        }
        model.rates /= zeta;
        r = &i_minus_pt * DMatrix::from_diagonal(&model.rates);
        r_inv_p = solve_r_p(&r, p)?;
        zeta = 1.0 / r_inv_p.sum();
        normalized = true;
    }
    let gamma = &r_inv_p * zeta;

    let mut sigma = DMatrix::from_diagonal(&(p * model.ca2)) + multinomial_covariance(p);
    for k in 0..d {
        let row: DVector<f64> = model.routing.row(k).transpose();
        if row.iter().all(|&x| x == 0.0) {
            continue;
        }
        sigma += multinomial_covariance(&row) * (gamma[k] * model.rates[k]);
    }
    sigma += &i_minus_pt
        * DMatrix::from_diagonal(&model.rates)
        * DMatrix::from_diagonal(&gamma)
        * &i_minus_p;
    let sigma = linalg::symmetrize(&sigma);

    let (min_eig, _) = linalg::sym_eig_range(&sigma);
    let threshold = ELLIPTICITY_RELATIVE * sigma.trace() / d as f64;
    if !(min_eig > threshold) {
        return Err(Error::NonEllipticCovariance { min_eig, threshold });
    }
    let sigma_factor = linalg::sym_sqrt(&sigma);
    let sigma_factor_inv = sigma_factor
        .clone()
        .try_inverse()
        .ok_or(Error::NonEllipticCovariance { min_eig, threshold })?;

    let drift_constant = p * (-model.beta);
    let drift_linear = -&r;
    let drift_kink = (&r - &eye * model.alpha) * p;

    Ok(DiffusionParams {
        model,
        r,
        zeta,
        gamma,
        sigma,
        sigma_factor,
        sigma_factor_inv,
        drift_constant,
        drift_linear,
        drift_kink,
        min_eig,
        normalized,
    })
}

/// Constants controlling the linear growth of the drift.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GrowthConstants {
    /// `|R|_op + |(R - alpha I) p e'|_op`, a Lipschitz constant of `g`.
    pub c_op: f64,
    /// `C_op + |sigma sigma'|_HS + 1 + |R - alpha I|_op + |beta|`, so that
    /// `|g(x)| <= C~_op (1 + |x|)`.
    pub c_op_tilde: f64,
}

impl GrowthConstants {
    /// Moment-growth constant `C_m = 2 m^2 C~_op`.
    pub fn c_m(&self, m: u32) -> f64 {
        2.0 * f64::from(m * m) * self.c_op_tilde
    }
}

impl DiffusionParams {
    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    pub fn alpha(&self) -> f64 {
        self.model.alpha
    }

    pub fn beta(&self) -> f64 {
        self.model.beta
    }

    pub fn initial(&self) -> &DVector<f64> {
        &self.model.initial
    }

    /// Exact piecewise-linear drift `g(x)`.
    pub fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim());
        self.drift_into(x.as_slice(), out.as_mut_slice());
        out
    }

    /// Allocation-free drift evaluation for hot loops.
    #[inline]
    pub fn drift_into(&self, x: &[f64], out: &mut [f64]) {
        let kink = x.iter().sum::<f64>().max(0.0);
        self.affine_drift_into(x, kink, out);
    }

    /// `-beta p - R x + w (R - alpha I) p` for a given kink weight `w`.
    #[inline]
    pub(crate) fn affine_drift_into(&self, x: &[f64], weight: f64, out: &mut [f64]) {
        let d = self.dim();
        linalg::matvec_into(self.drift_linear.as_slice(), d, x, out);
        for ((o, &c), &k) in out.iter_mut().zip(self.drift_constant.iter()).zip(self.drift_kink.iter()) {
            *o += c + weight * k;
        }
    }

    /// `(R - alpha I) p e'`, the jump of the drift Jacobian across `e'x = 0`.
    pub fn kink_matrix(&self) -> DMatrix<f64> {
        let e = DVector::from_element(self.dim(), 1.0);
        &self.drift_kink * e.transpose()
    }

    pub fn growth_constants(&self) -> GrowthConstants {
        let d = self.dim();
        let c_op = linalg::op_norm(&self.r) + linalg::op_norm(&self.kink_matrix());
        let r_minus_alpha = &self.r - DMatrix::<f64>::identity(d, d) * self.alpha();
        let c_op_tilde = c_op
            + linalg::hs_norm(&self.sigma)
            + 1.0
            + linalg::op_norm(&r_minus_alpha)
            + self.beta().abs();
        GrowthConstants { c_op, c_op_tilde }
    }

    /// Largest entrywise deviation of `sigma_factor sigma_factor'` from `sigma`.
    pub fn factor_residual(&self) -> f64 {
        (&self.sigma_factor * self.sigma_factor.transpose() - &self.sigma).amax()
    }
}
