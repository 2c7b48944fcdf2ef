#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hwdiff::model::{derive_params, DiffusionParams, PhaseTypeModel};

/// Random valid model with `1..=max_dim` phases: zero-diagonal routing
/// with row sums below 0.9, rates in `[0.3, 4)`, strictly positive `p`.
pub fn random_model(seed: u64, max_dim: usize) -> PhaseTypeModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rng.random_range(1..=max_dim);
    let mut routing = DMatrix::zeros(d, d);
    for i in 0..d {
        let budget = rng.random_range(0.0..0.9);
        let w: Vec<f64> = (0..d).map(|j| if i == j { 0.0 } else { rng.random::<f64>() }).collect();
        let s: f64 = w.iter().sum();
        for j in 0..d {
            if s > 0.0 {
                routing[(i, j)] = budget * w[j] / s;
            }
        }
    }
    let w: Vec<f64> = (0..d).map(|_| rng.random_range(0.05..1.0)).collect();
    let s: f64 = w.iter().sum();
    PhaseTypeModel {
        routing,
        rates: DVector::from_iterator(d, (0..d).map(|_| rng.random_range(0.3..4.0))),
        initial: DVector::from_iterator(d, w.iter().map(|x| x / s)),
        alpha: rng.random_range(0.1..3.0),
        beta: rng.random_range(-2.0..2.0),
        ca2: rng.random_range(0.2..3.0),
    }
}

pub fn random_params(seed: u64, max_dim: usize) -> DiffusionParams {
    derive_params(&random_model(seed, max_dim), true).expect("random models are valid")
}

pub fn benchmark() -> DiffusionParams {
    derive_params(&PhaseTypeModel::single_phase(0.5, 1.0, 1.0), false).unwrap()
}

pub fn two_phase() -> DiffusionParams {
    let model = PhaseTypeModel {
        routing: DMatrix::from_row_slice(2, 2, &[0.0, 0.2, 0.0, 0.0]),
        rates: DVector::from_vec(vec![1.0, 2.0]),
        initial: DVector::from_vec(vec![1.0, 0.0]),
        alpha: 0.5,
        beta: 1.0,
        ca2: 1.0,
    };
    derive_params(&model, true).unwrap()
}

/// Adaptive Simpson quadrature on 256 equal panels (so narrow peaks are
/// not missed by the first coarse estimate).
pub fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    let panels = 256;
    let h = (b - a) / panels as f64;
    (0..panels).map(|i| simpson_panel(f, a + i as f64 * h, a + (i + 1) as f64 * h, tol / panels as f64)).sum()
}

fn simpson_panel(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn step(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        step(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + step(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }
    let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    step(f, a, b, fa, fm, fb, whole, tol, 40)
}
