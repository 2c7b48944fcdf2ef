//! Wasserstein-1 distances and the exact stationary density of the
//! one-dimensional diffusion.
//!
//! For `d = 1` the drift is `-beta - x` for `x <= 0` and `-beta - alpha x`
//! for `x > 0`, so the stationary density `pi ∝ exp(2 int_0^x g / sigma^2)`
//! is a Gaussian on each half-line:
//!
//! ```text
//! pi(x) ∝ exp((-2 beta x - x^2) / sigma^2)          x <= 0
//!       ∝ exp((-2 beta x - alpha x^2) / sigma^2)    x > 0
//! ```

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::integrator::replica_rng;

/// Weighted point cloud in `R^d`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalSample {
    pub dim: usize,
    pub points: Vec<f64>,
    pub weights: Option<Vec<f64>>,
}

impl EmpiricalSample {
    pub fn new(dim: usize, points: Vec<f64>) -> Result<Self> {
        if dim == 0 || points.len() % dim != 0 {
            return Err(Error::DimensionMismatch { expected: dim, got: points.len() });
        }
        Ok(EmpiricalSample { dim, points, weights: None })
    }

    pub fn from_1d(points: Vec<f64>) -> Self {
        EmpiricalSample { dim: 1, points, weights: None }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(1, |r| r.len());
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::DegenerateInput("rows of unequal length".into()));
        }
        EmpiricalSample::new(dim, rows.concat())
    }

    /// Attaches weights; they must be nonnegative and sum to 1.
    pub fn with_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != self.len() {
            return Err(Error::DimensionMismatch { expected: self.len(), got: weights.len() });
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|w| !(*w >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::DegenerateInput("weights must be nonnegative and sum to 1".into()));
        }
        self.weights = Some(weights);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    fn weight(&self, i: usize) -> f64 {
        self.weights.as_ref().map_or(1.0 / self.len() as f64, |w| w[i])
    }

    /// Projections `<u, x_i>` with their weights.
    fn project(&self, u: &[f64]) -> Vec<(f64, f64)> {
        (0..self.len())
            .map(|i| (self.point(i).iter().zip(u).map(|(a, b)| a * b).sum(), self.weight(i)))
            .collect()
    }

    fn atoms_1d(&self) -> Vec<(f64, f64)> {
        (0..self.len()).map(|i| (self.points[i], self.weight(i))).collect()
    }
}

/// W1 between two weighted atom lists on the line, `int |F_a - F_b| dx`.
fn w1_atoms(mut a: Vec<(f64, f64)>, mut b: Vec<(f64, f64)>) -> f64 {
    a.sort_by(|x, y| x.0.total_cmp(&y.0));
    b.sort_by(|x, y| x.0.total_cmp(&y.0));
    let (mut i, mut j) = (0, 0);
    let (mut fa, mut fb) = (0.0f64, 0.0f64);
    let mut last = f64::NAN;
    let mut total = 0.0;
    while i < a.len() || j < b.len() {
        let x = match (a.get(i), b.get(j)) {
            (Some(p), Some(q)) => p.0.min(q.0),
            (Some(p), None) => p.0,
            (None, Some(q)) => q.0,
            (None, None) => unreachable!(),
        };
        if !last.is_nan() {
            total += (fa - fb).abs() * (x - last);
        }
        while i < a.len() && a[i].0 == x {
            fa += a[i].1;
            i += 1;
        }
        while j < b.len() && b[j].0 == x {
            fb += b[j].1;
            j += 1;
        }
        last = x;
    }
    total
}

/// Sorted-sample W1 between equal-size unweighted 1-D samples,
/// `(1/n) sum |x_(i) - y_(i)|`.
pub fn w1_sorted(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch { expected: a.len(), got: b.len() });
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_by(f64::total_cmp);
    y.sort_by(f64::total_cmp);
    Ok(x.iter().zip(&y).map(|(p, q)| (p - q).abs()).sum::<f64>() / a.len() as f64)
}

/// W1 between two 1-D samples: the sorted formula for equal-size
/// unweighted samples, otherwise `int |F_a - F_b|` (quantile coupling).
pub fn w1_sorted_1d(a: &EmpiricalSample, b: &EmpiricalSample) -> Result<f64> {
    for s in [a, b] {
        if s.dim != 1 {
            return Err(Error::DimensionMismatch { expected: 1, got: s.dim });
        }
    }
    if a.len() == b.len() && a.weights.is_none() && b.weights.is_none() {
        return w1_sorted(&a.points, &b.points);
    }
    Ok(w1_atoms(a.atoms_1d(), b.atoms_1d()))
}

/// Monte Carlo sliced W1: the mean 1-D W1 of projections on
/// `n_directions` seeded uniform unit vectors. A proxy for multi-d W1,
/// never larger than it.
pub fn sliced_w1(a: &EmpiricalSample, b: &EmpiricalSample, n_directions: usize, seed: u64) -> Result<f64> {
    if a.dim != b.dim {
        return Err(Error::DimensionMismatch { expected: a.dim, got: b.dim });
    }
    if n_directions == 0 {
        return Err(Error::InvalidConfig("need at least one direction".into()));
    }
    let mut rng = replica_rng(seed, 0);
    let dirs: Vec<Vec<f64>> = (0..n_directions)
        .map(|_| {
            let v: Vec<f64> = (0..a.dim).map(|_| rng.sample(StandardNormal)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect()
        })
        .collect();
    let per: Vec<f64> = dirs.par_iter().map(|u| w1_atoms(a.project(u), b.project(u))).collect();
    Ok(per.iter().sum::<f64>() / n_directions as f64)
}

/// Default sliced-W1 direction count.
pub const SLICED_DIRECTIONS: usize = 128;

/// Gaussian restricted to a half-line, with its mixture weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HalfGaussian {
    pub mean: f64,
    pub sd: f64,
    /// Mass of the piece under `pi`.
    pub weight: f64,
    /// `P(N(mean, sd^2)` lies on this piece's half-line`)`.
    pub normal_mass: f64,
}

/// Exact stationary law of the one-dimensional diffusion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Benchmark1D {
    pub beta: f64,
    pub alpha: f64,
    pub sigma2: f64,
    /// `int exp(2 int_0^x g / sigma^2) dx`.
    pub z: f64,
    /// Piece on `x <= 0`: `N(-beta, sigma^2/2)`.
    pub left: HalfGaussian,
    /// Piece on `x > 0`: `N(-beta/alpha, sigma^2/(2 alpha))`.
    pub right: HalfGaussian,
}

fn std_normal() -> Normal {
    Normal::standard()
}

/// Builds the stationary law for drift slopes `1` (left) and `alpha`
/// (right), offset `beta` and variance `sigma2 = c_a^2 + 1`.
pub fn analytic_density_1d(beta: f64, alpha: f64, sigma2: f64) -> Result<Benchmark1D> {
    if !(alpha > 0.0 && sigma2 > 0.0 && beta.is_finite()) {
        return Err(Error::InvalidConfig(format!("need alpha > 0 and sigma2 > 0, got {alpha}, {sigma2}")));
    }
    let n = std_normal();
    let pi = std::f64::consts::PI;
    let (m_l, s_l) = (-beta, (sigma2 / 2.0).sqrt());
    let (m_r, s_r) = (-beta / alpha, (sigma2 / (2.0 * alpha)).sqrt());
    // P(N(m, s^2) <= 0) and P(N(m, s^2) > 0).
    let mass_l = n.cdf(-m_l / s_l);
    let mass_r = n.sf(-m_r / s_r);
    // Unnormalized integrals of each piece, in log space.
    let log_l = beta * beta / sigma2 + 0.5 * (pi * sigma2).ln() + mass_l.ln();
    let log_r = beta * beta / (alpha * sigma2) + 0.5 * (pi * sigma2 / alpha).ln() + mass_r.ln();
    let top = log_l.max(log_r);
    let (a, b) = ((log_l - top).exp(), (log_r - top).exp());
    let z = top.exp() * (a + b);
    Ok(Benchmark1D {
        beta,
        alpha,
        sigma2,
        z,
        left: HalfGaussian { mean: m_l, sd: s_l, weight: a / (a + b), normal_mass: mass_l },
        right: HalfGaussian { mean: m_r, sd: s_r, weight: b / (a + b), normal_mass: mass_r },
    })
}

impl Benchmark1D {
    /// The benchmark for model parameters `(alpha, beta, c_a^2)`.
    pub fn for_model(alpha: f64, beta: f64, ca2: f64) -> Result<Self> {
        analytic_density_1d(beta, alpha, ca2 + 1.0)
    }

    /// Unnormalized density `exp(2 int_0^x g / sigma^2)`.
    pub fn unnormalized(&self, x: f64) -> f64 {
        let a = if x <= 0.0 { 1.0 } else { self.alpha };
        ((-2.0 * self.beta * x - a * x * x) / self.sigma2).exp()
    }

    pub fn pdf(&self, x: f64) -> f64 {
        let n = std_normal();
        let piece = if x <= 0.0 { &self.left } else { &self.right };
        piece.weight * n.pdf((x - piece.mean) / piece.sd) / (piece.sd * piece.normal_mass)
    }

    pub fn cdf(&self, x: f64) -> f64 {
        let n = std_normal();
        let (l, r) = (&self.left, &self.right);
        if x <= 0.0 {
            l.weight * n.cdf((x - l.mean) / l.sd) / l.normal_mass
        } else {
            // Upper tail form keeps precision when the right piece is far out.
            1.0 - r.weight * n.sf((x - r.mean) / r.sd) / r.normal_mass
        }
    }

    pub fn quantile(&self, q: f64) -> f64 {
        let n = std_normal();
        let (l, r) = (&self.left, &self.right);
        if q <= 0.0 {
            return f64::NEG_INFINITY;
        }
        if q >= 1.0 {
            return f64::INFINITY;
        }
        if q <= l.weight {
            l.mean + l.sd * n.inverse_cdf((q / l.weight * l.normal_mass).min(1.0))
        } else {
            let tail = (1.0 - q) / r.weight * r.normal_mass;
            (r.mean - r.sd * n.inverse_cdf(tail.min(1.0))).max(0.0)
        }
    }

    /// `int_{-inf}^x y pi(y) dy`.
    pub fn partial_mean(&self, x: f64) -> f64 {
        let n = std_normal();
        let (l, r) = (&self.left, &self.right);
        // For N(m, s^2) and z = (c - m)/s:
        //   int_{-inf}^c y phi = m Phi(z) - s phi(z)   (left piece)
        //   int_c^{inf} y phi  = m Q(z) + s phi(z)     (right piece; no cancellation
        //                                              when it lies far in the tail)
        let below = |h: &HalfGaussian, c: f64| {
            if c == f64::NEG_INFINITY {
                return 0.0;
            }
            let z = (c - h.mean) / h.sd;
            h.mean * n.cdf(z) - h.sd * n.pdf(z)
        };
        let above = |h: &HalfGaussian, c: f64| {
            if c == f64::INFINITY {
                return 0.0;
            }
            let z = (c - h.mean) / h.sd;
            h.mean * n.sf(z) + h.sd * n.pdf(z)
        };
        if x <= 0.0 {
            l.weight * below(l, x) / l.normal_mass
        } else {
            l.weight * below(l, 0.0) / l.normal_mass + r.weight * (above(r, 0.0) - above(r, x)) / r.normal_mass
        }
    }

    pub fn mean(&self) -> f64 {
        self.partial_mean(f64::INFINITY)
    }

    /// `int_{-inf}^x F(y) dy = x F(x) - partial_mean(x)`.
    fn integrated_cdf(&self, x: f64) -> f64 {
        x * self.cdf(x) - self.partial_mean(x)
    }

    /// `int_{-inf}^x (1 - F(y))`-style tail helper: `int_x^inf (1 - F)`.
    fn integrated_survival(&self, x: f64) -> f64 {
        // int_x^inf (1 - F) = E[(X - x)^+] = (mean - partial_mean(x)) - x (1 - F(x)).
        (self.mean() - self.partial_mean(x)) - x * (1.0 - self.cdf(x))
    }
}

/// Default quantile-grid resolution for sample-vs-density W1.
pub const QUANTILE_GRID: usize = 4096;

/// `int |F_n(x) - F(x)| dx` exactly, piece by piece between sample points.
pub fn w1_to_density_exact(sample: &[f64], bench: &Benchmark1D) -> Result<f64> {
    if sample.is_empty() {
        return Err(Error::DegenerateInput("empty sample".into()));
    }
    let mut x = sample.to_vec();
    x.sort_by(f64::total_cmp);
    let n = x.len() as f64;
    // Left of the minimum F_n = 0; right of the maximum F_n = 1.
    let mut total = bench.integrated_cdf(x[0]) + bench.integrated_survival(x[x.len() - 1]);
    let pieces: f64 = x
        .par_windows(2)
        .enumerate()
        .map(|(i, w)| abs_gap(bench, (i + 1) as f64 / n, w[0], w[1]))
        .sum();
    total += pieces;
    Ok(total)
}

/// `int_a^b |c - F(y)| dy` for a constant level `c`.
fn abs_gap(bench: &Benchmark1D, c: f64, a: f64, b: f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    let cross = bench.quantile(c).clamp(a, b);
    let big_f = |x: f64| bench.integrated_cdf(x);
    let below = c * (cross - a) - (big_f(cross) - big_f(a));
    let above = (big_f(b) - big_f(cross)) - c * (b - cross);
    below.max(0.0) + above.max(0.0)
}

/// `int |F_n(x) - F(x)| dx` by the trapezoid rule on the nodes
/// `x_j = F^{-1}(j / m)`, `j = 1..m-1`, with both tails beyond the extreme
/// nodes integrated exactly between sample points.
pub fn w1_to_density(sample: &[f64], bench: &Benchmark1D, nodes: usize) -> Result<f64> {
    if sample.is_empty() {
        return Err(Error::DegenerateInput("empty sample".into()));
    }
    if nodes < 4 {
        return Err(Error::InvalidConfig(format!("quantile grid needs at least 4 nodes, got {nodes}")));
    }
    let mut x = sample.to_vec();
    x.sort_by(f64::total_cmp);
    let n = x.len() as f64;
    let ecdf = |v: f64| x.partition_point(|s| *s <= v) as f64 / n;
    let grid: Vec<f64> = (1..nodes).map(|j| bench.quantile(j as f64 / nodes as f64)).collect();
    let diff: Vec<f64> = grid.iter().map(|&g| (ecdf(g) - bench.cdf(g)).abs()).collect();
    let mut total: f64 = grid.windows(2).zip(diff.windows(2)).map(|(g, f)| 0.5 * (f[0] + f[1]) * (g[1] - g[0])).sum();

    let lo = grid[0];
    let hi = grid[grid.len() - 1];
    // Lower tail: (-inf, lo].
    let below = x.partition_point(|s| *s <= lo);
    if below == 0 {
        total += bench.integrated_cdf(lo);
    } else {
        total += bench.integrated_cdf(x[0]);
        for i in 0..below {
            let right = if i + 1 < below { x[i + 1] } else { lo };
            total += abs_gap(bench, (i + 1) as f64 / n, x[i], right);
        }
    }
    // Upper tail: [hi, inf).
    let first_above = x.partition_point(|s| *s < hi);
    if first_above == x.len() {
        total += bench.integrated_survival(hi);
    } else {
        let mut left = hi;
        for (i, &xi) in x.iter().enumerate().skip(first_above) {
            total += abs_gap(bench, i as f64 / n, left, xi);
            left = xi;
        }
        total += bench.integrated_survival(x[x.len() - 1]);
    }
    Ok(total)
}

/// Least-squares fit of `log distance = slope log eta + intercept`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Fewest `(eta, distance)` pairs accepted by [`rate_fit`].
pub const MIN_RATE_POINTS: usize = 4;

pub fn rate_fit(pairs: &[(f64, f64)]) -> Result<RateFit> {
    if pairs.len() < MIN_RATE_POINTS {
        return Err(Error::DegenerateInput(format!("need at least {MIN_RATE_POINTS} pairs, got {}", pairs.len())));
    }
    if pairs.iter().any(|&(e, d)| !(e > 0.0 && d > 0.0)) {
        return Err(Error::DegenerateInput("step sizes and distances must be positive".into()));
    }
    let pts: Vec<(f64, f64)> = pairs.iter().map(|&(e, d)| (e.ln(), d.ln())).collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::DegenerateInput("all step sizes are equal".into()));
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = pts.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
    let ss_tot: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Ok(RateFit { slope, intercept, r2 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn trivial_w1() {
        assert_eq!(w1_sorted(&[0.0, 1.0], &[1.0, 0.0]).unwrap(), 0.0);
        assert_eq!(w1_sorted(&[0.0], &[1.0]).unwrap(), 1.0);
        assert!(w1_sorted(&[0.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn unequal_sizes_use_cdf_gap() {
        let a = EmpiricalSample::from_1d(vec![0.0]);
        let b = EmpiricalSample::from_1d(vec![0.0, 2.0]);
        assert_relative_eq!(w1_sorted_1d(&a, &b).unwrap(), 1.0);
    }

    #[test]
    fn symmetric_gaussian_case() {
        let b = analytic_density_1d(0.0, 1.0, 2.0).unwrap();
        assert_relative_eq!(b.mean(), 0.0, epsilon = 1e-15);
        assert_relative_eq!(b.cdf(0.0), 0.5, epsilon = 1e-15);
        assert_relative_eq!(b.pdf(0.7), b.pdf(-0.7), epsilon = 1e-15);
    }

    #[test]
    fn full_line_ou_mean() {
        let b = analytic_density_1d(1.0, 1.0, 2.0).unwrap();
        assert_relative_eq!(b.mean(), -1.0, epsilon = 1e-12);
    }

    #[test]
    fn density_continuous_at_zero() {
        let b = analytic_density_1d(1.0, 0.5, 2.0).unwrap();
        assert_relative_eq!(b.pdf(0.0), b.pdf(1e-300), max_relative = 1e-12);
        assert_relative_eq!(b.pdf(0.0), 1.0 / b.z, max_relative = 1e-12);
    }

    #[test]
    fn quantile_inverts_cdf() {
        let b = analytic_density_1d(1.0, 0.5, 2.0).unwrap();
        for i in 1..100 {
            let q = i as f64 / 100.0;
            assert!((b.cdf(b.quantile(q)) - q).abs() < 1e-9);
        }
    }

    #[test]
    fn rate_fit_synthetic() {
        let pts: Vec<(f64, f64)> = [0.1, 0.05, 0.025, 0.0125].iter().map(|&e| (e, f64::sqrt(e))).collect();
        let f = rate_fit(&pts).unwrap();
        assert_relative_eq!(f.slope, 0.5, epsilon = 1e-12);
        assert_relative_eq!(f.r2, 1.0, epsilon = 1e-12);
        let flat: Vec<(f64, f64)> = [0.1, 0.05, 0.025, 0.0125].iter().map(|&e| (e, 0.3)).collect();
        assert!(rate_fit(&flat).unwrap().slope.abs() < 1e-12);
        assert!(rate_fit(&pts[..3]).is_err());
    }
}
