//! Lyapunov function
//!
//! ```text
//! V(y) = (e'y)^2 + kappa w' Q w + c2,     w = y - p phi(e'y),
//! ```
//!
//! and a grid check of the drift inequality `A V <= -c1 V + c1_breve`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::dynamics::{generator_apply, TestFunction};
use crate::error::{Error, Result};
use crate::integrator::replica_rng;
use crate::linalg;
use crate::model::DiffusionParams;

/// `lambda_max(Q(-R) + (-R)'Q)` must lie below `-STRICT_TOLERANCE`.
pub const STRICT_TOLERANCE: f64 = 1e-9;
/// `lambda_max` of the projected form may not exceed this.
pub const SEMIDEFINITE_TOLERANCE: f64 = 1e-9;

/// The `C^2` spline
///
/// ```text
/// phi(z) = z                       z >= 0
///        = -z^4/2 - z^3 + z        -1 < z < 0
///        = -1/2                    z <= -1
/// ```
#[derive(Debug, Clone, Copy, Default)]
pub struct PhiSpline;

impl PhiSpline {
    /// Value, first and second derivative at `z`.
    #[inline]
    pub fn eval(z: f64) -> (f64, f64, f64) {
        if z >= 0.0 {
            (z, 1.0, 0.0)
        } else if z <= -1.0 {
            (-0.5, 0.0, 0.0)
        } else {
            let z2 = z * z;
            (
                -0.5 * z2 * z2 - z2 * z + z,
                -2.0 * z2 * z - 3.0 * z2 + 1.0,
                -6.0 * z2 - 6.0 * z,
            )
        }
    }

    pub fn value(z: f64) -> f64 {
        Self::eval(z).0
    }
}

/// How the quadratic form was obtained.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum QConstruction {
    /// `Q(-R) + (-R)'Q = -D` with `D` the given diagonal.
    Diagonal { diagonal: Vec<f64> },
    /// `Q = T^{-T} diag(c, M) T^{-1}` with `T = [gamma, U]`, `U` an
    /// orthonormal basis of `e'y = 0` and `M` the Lyapunov solution of the
    /// projected matrix on that hyperplane.
    Reduced { scale: f64 },
}

/// Ingredients of the Lyapunov function.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LyapunovSpec {
    /// Symmetric positive-definite, normalized to `sum |Q_ij| = 1`.
    #[serde(serialize_with = "linalg::serialize_rows")]
    pub q_tilde: DMatrix<f64>,
    pub kappa: f64,
    pub c2_hat: f64,
    pub construction: QConstruction,
    /// `lambda_max(Q(-R) + (-R)'Q)`.
    pub strict_max_eig: f64,
    /// `lambda_max(Q B + B'Q)`, `B = -(I - p e') R`.
    pub semi_max_eig: f64,
}

fn conditions(q: &DMatrix<f64>, params: &DiffusionParams) -> (f64, f64) {
    let minus_r = -&params.r;
    let strict = q * &minus_r + minus_r.transpose() * q;
    let b = projected_matrix(params);
    let semi = q * &b + b.transpose() * q;
    (linalg::sym_eig_range(&strict).1, linalg::sym_eig_range(&semi).1)
}

/// `B = -(I - p e') R`.
fn projected_matrix(params: &DiffusionParams) -> DMatrix<f64> {
    let d = params.dim();
    let e = DVector::from_element(d, 1.0);
    -(DMatrix::identity(d, d) - params.initial() * e.transpose()) * &params.r
}

fn normalize(q: DMatrix<f64>) -> DMatrix<f64> {
    let s = q.iter().map(|v| v.abs()).sum::<f64>();
    linalg::symmetrize(&(q / s))
}

fn feasible(strict: f64, semi: f64, q: &DMatrix<f64>) -> bool {
    strict < -STRICT_TOLERANCE && semi <= SEMIDEFINITE_TOLERANCE && linalg::sym_eig_range(q).0 > 0.0
}

/// [`solve_qtilde_with`] with `kappa = 1`.
pub fn solve_qtilde(params: &DiffusionParams) -> Result<LyapunovSpec> {
    solve_qtilde_with(params, 1.0)
}

/// Finds `Q` with `Q(-R) + (-R)'Q < 0` and `QB + B'Q <= 0`.
///
/// The Lyapunov equation `Q(-R) + (-R)'Q = -D` is tried first for
/// `D = I, diag(1..d), diag(d..1)`. Since `B gamma = 0` and `e'B = 0`, the
/// second condition forces `Q gamma` to be parallel to `e`, which these
/// candidates rarely satisfy when `d >= 2`; the reduced construction (see
/// [`QConstruction::Reduced`]) satisfies it by design and its free scale
/// is chosen to make the first condition as negative as possible.
pub fn solve_qtilde_with(params: &DiffusionParams, kappa: f64) -> Result<LyapunovSpec> {
    if !(kappa > 0.0) {
        return Err(Error::InvalidConfig(format!("kappa must be positive, got {kappa}")));
    }
    let d = params.dim();
    let minus_r = -&params.r;
    let mut best = (f64::INFINITY, f64::INFINITY);

    let diagonals: [Vec<f64>; 3] = [
        vec![1.0; d],
        (1..=d).map(|i| i as f64).collect(),
        (1..=d).rev().map(|i| i as f64).collect(),
    ];
    for diag in diagonals {
        let rhs = -DMatrix::from_diagonal(&DVector::from_vec(diag.clone()));
        let Some(q) = linalg::solve_lyapunov(&minus_r, &rhs) else {
            continue;
        };
        let q = normalize(q);
        let (strict, semi) = conditions(&q, params);
        if feasible(strict, semi, &q) {
            return Ok(LyapunovSpec {
                q_tilde: q,
                kappa,
                c2_hat: 0.0,
                construction: QConstruction::Diagonal { diagonal: diag },
                strict_max_eig: strict,
                semi_max_eig: semi,
            });
        }
        if semi < best.1 {
            best = (strict, semi);
        }
    }

    let u = linalg::sum_zero_basis(d);
    let b = projected_matrix(params);
    let b_u = u.transpose() * &b * &u;
    let m = linalg::solve_lyapunov(&b_u, &-DMatrix::<f64>::identity(d - 1, d - 1));
    if let Some(m) = m {
        let mut t = DMatrix::<f64>::zeros(d, d);
        t.set_column(0, &params.gamma);
        t.columns_mut(1, d - 1).copy_from(&u);
        if let Some(t_inv) = t.try_inverse() {
            let mut chosen: Option<(f64, DMatrix<f64>, f64, f64)> = None;
            for i in 0..=80 {
                let c = 10f64.powf(-4.0 + 0.1 * i as f64);
                let mut block = DMatrix::<f64>::zeros(d, d);
                block[(0, 0)] = c;
                block.view_mut((1, 1), (d - 1, d - 1)).copy_from(&m);
                let q = normalize(t_inv.transpose() * block * &t_inv);
                let (strict, semi) = conditions(&q, params);
                if feasible(strict, semi, &q) {
                    if chosen.as_ref().map_or(true, |(_, _, s, _)| strict < *s) {
                        chosen = Some((c, q, strict, semi));
                    }
                } else if semi < best.1 || (semi <= SEMIDEFINITE_TOLERANCE && strict < best.0) {
                    best = (strict, semi);
                }
            }
            if let Some((scale, q, strict, semi)) = chosen {
                return Ok(LyapunovSpec {
                    q_tilde: q,
                    kappa,
                    c2_hat: 0.0,
                    construction: QConstruction::Reduced { scale },
                    strict_max_eig: strict,
                    semi_max_eig: semi,
                });
            }
        }
    }
    Err(Error::NoFeasibleQ { strict_max: best.0, semi_max: best.1 })
}

/// Value, gradient and Hessian of `V` at `y`.
pub fn lyapunov_value_grad_hess(
    spec: &LyapunovSpec,
    params: &DiffusionParams,
    y: &DVector<f64>,
) -> (f64, DVector<f64>, DMatrix<f64>) {
    let d = params.dim();
    let p = params.initial();
    let e = DVector::from_element(d, 1.0);
    let s = y.sum();
    let (phi, phi_dot, phi_ddot) = PhiSpline::eval(s);
    let w = y - p * phi;
    let qw = &spec.q_tilde * &w;
    let k = spec.kappa;

    let value = s * s + k * w.dot(&qw) + spec.c2_hat;
    // dw/dy = I - phi_dot p e'
    let m = DMatrix::identity(d, d) - p * e.transpose() * phi_dot;
    let grad = &e * (2.0 * s) + m.transpose() * &qw * (2.0 * k);
    let eet = &e * e.transpose();
    let hess = &eet * 2.0
        + (m.transpose() * &spec.q_tilde * &m - &eet * (phi_ddot * p.dot(&qw))) * (2.0 * k);
    (value, grad, linalg::symmetrize(&hess))
}

/// `V` as a [`TestFunction`] for the generator.
pub struct LyapunovFunction<'a> {
    pub spec: &'a LyapunovSpec,
    pub params: &'a DiffusionParams,
}

impl TestFunction for LyapunovFunction<'_> {
    fn value(&self, x: &DVector<f64>) -> f64 {
        lyapunov_value_grad_hess(self.spec, self.params, x).0
    }
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        lyapunov_value_grad_hess(self.spec, self.params, x).1
    }
    fn hessian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        lyapunov_value_grad_hess(self.spec, self.params, x).2
    }
}

/// Radial evaluation grid: `n_radii` equally spaced radii up to
/// `radius_factor * sqrt(tr Sigma)` along `n_directions` unit vectors
/// (both signs in `d = 1`, equally spaced angles in `d = 2`, seeded
/// Gaussian directions otherwise), plus the origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RadialGrid {
    pub radius_factor: f64,
    pub n_radii: usize,
    pub n_directions: usize,
    pub seed: u64,
}

impl Default for RadialGrid {
    fn default() -> Self {
        RadialGrid { radius_factor: 20.0, n_radii: 40, n_directions: 32, seed: 0 }
    }
}

impl RadialGrid {
    /// Twice the radii and twice the directions; every point of `self` is
    /// also a point of the refined grid.
    pub fn refined(&self) -> Self {
        RadialGrid { n_radii: 2 * self.n_radii, n_directions: 2 * self.n_directions, ..*self }
    }

    pub fn scale(params: &DiffusionParams) -> f64 {
        params.sigma.trace().sqrt()
    }

    pub fn max_radius(&self, params: &DiffusionParams) -> f64 {
        self.radius_factor * Self::scale(params)
    }

    fn directions(&self, d: usize) -> Vec<DVector<f64>> {
        match d {
            1 => vec![DVector::from_element(1, 1.0), DVector::from_element(1, -1.0)],
            2 => (0..self.n_directions)
                .map(|i| {
                    let a = std::f64::consts::TAU * i as f64 / self.n_directions as f64;
                    DVector::from_vec(vec![a.cos(), a.sin()])
                })
                .collect(),
            _ => {
                let mut rng = replica_rng(self.seed, 0);
                (0..self.n_directions)
                    .map(|_| {
                        let v = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
                        let n = v.norm();
                        v / n
                    })
                    .collect()
            }
        }
    }

    pub fn points(&self, params: &DiffusionParams) -> Vec<DVector<f64>> {
        let d = params.dim();
        let r_max = self.max_radius(params);
        let mut pts = vec![DVector::zeros(d)];
        for u in self.directions(d) {
            for i in 1..=self.n_radii {
                pts.push(&u * (r_max * i as f64 / self.n_radii as f64));
            }
        }
        pts
    }
}

/// Outcome of the drift check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DriftReport {
    /// Largest `c1` with `A V + c1 V <= 0` on the outer shell.
    pub c1: f64,
    /// Smallest `c1_breve` with `A V <= -c1 V + c1_breve` on the whole grid.
    pub c1_breve: f64,
    /// `min (-A V / V)` over the outer shell; equals `c1`.
    pub margin: f64,
    /// `(c1, c1_breve(c1))` on a log grid of decay rates up to `c1`.
    pub c1_curve: Vec<(f64, f64)>,
    /// `A V(0)`.
    pub generator_at_origin: f64,
    pub grid_points: usize,
    pub max_radius: f64,
}

/// Points with `|y| >= SHELL_FRACTION * max radius` form the outer shell.
pub const SHELL_FRACTION: f64 = 0.5;

/// Evaluates `A V` at every grid point and fits the drift inequality.
pub fn lyapunov_check(spec: &LyapunovSpec, params: &DiffusionParams, grid: &[DVector<f64>]) -> Result<DriftReport> {
    let f = LyapunovFunction { spec, params };
    let evals: Vec<(f64, f64, f64)> = grid
        .par_iter()
        .map(|y| Ok((y.norm(), f.value(y), generator_apply(params, &f, y)?)))
        .collect::<Result<_>>()?;
    let max_radius = evals.iter().map(|e| e.0).fold(0.0, f64::max);
    if max_radius == 0.0 {
        return Err(Error::DegenerateInput("grid has no nonzero points".into()));
    }
    let margin = evals
        .iter()
        .filter(|e| e.0 >= SHELL_FRACTION * max_radius)
        .map(|&(_, v, av)| -av / v)
        .fold(f64::INFINITY, f64::min);
    if !(margin > 0.0) {
        return Err(Error::DriftConditionViolated(margin));
    }
    let breve = |c1: f64| evals.iter().map(|&(_, v, av)| av + c1 * v).fold(0.0, f64::max);
    let c1_curve = (0..=20)
        .map(|i| {
            let c = margin * 10f64.powf(-2.0 + 0.1 * i as f64);
            (c, breve(c))
        })
        .collect();
    let origin = DVector::zeros(params.dim());
    Ok(DriftReport {
        c1: margin,
        c1_breve: breve(margin),
        margin,
        c1_curve,
        generator_at_origin: generator_apply(params, &f, &origin)?,
        grid_points: grid.len(),
        max_radius,
    })
}

/// Fitted quadratic bounds `c1_hat |y|^2 - c2_hat <= V(y) <= C1_hat |y|^2 + C2_hat + c2_hat`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundConstants {
    pub c1_hat: f64,
    pub big_c1_hat: f64,
    pub big_c2_hat: f64,
    pub c2_hat: f64,
}

/// Fits the shift `c2_hat = max(0, -min V)` (stored into `spec`) and the
/// quadratic bound constants over `grid`.
pub fn fit_constants(spec: &mut LyapunovSpec, params: &DiffusionParams, grid: &[DVector<f64>]) -> BoundConstants {
    let unshifted = LyapunovSpec { c2_hat: 0.0, ..spec.clone() };
    let vals: Vec<(f64, f64)> = grid
        .iter()
        .map(|y| (y.norm_squared(), lyapunov_value_grad_hess(&unshifted, params, y).0))
        .collect();
    let c2_hat = (-vals.iter().map(|v| v.1).fold(f64::INFINITY, f64::min)).max(0.0);
    spec.c2_hat = c2_hat;
    let ratios = vals.iter().filter(|v| v.0 > 0.0).map(|v| v.1 / v.0);
    let c1_hat = ratios.clone().fold(f64::INFINITY, f64::min);
    let r2_max = vals.iter().map(|v| v.0).fold(0.0, f64::max);
    let big_c1_hat = vals
        .iter()
        .filter(|v| v.0 >= SHELL_FRACTION * SHELL_FRACTION * r2_max)
        .map(|v| v.1 / v.0)
        .fold(0.0, f64::max);
    let big_c2_hat = vals.iter().map(|v| v.1 - big_c1_hat * v.0).fold(0.0, f64::max);
    BoundConstants { c1_hat, big_c1_hat, big_c2_hat, c2_hat }
}
