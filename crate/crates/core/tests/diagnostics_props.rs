mod common;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use hwdiff::diagnostics::{
    jacobian_flow, lyapunov_value_grad_hess, occupation_integrand, occupation_phi_eps, simulate_mollified_path,
    solve_qtilde, FlowMode, PhiSpline, SEMIDEFINITE_TOLERANCE, STRICT_TOLERANCE,
};
use hwdiff::ergodic::seeded_normals;
use hwdiff::linalg;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn qtilde_meets_both_eigen_conditions(seed in any::<u64>()) {
        let params = common::random_params(seed, 4);
        // Not every random model admits a feasible Q; those that do must
        // satisfy both conditions at the returned matrix.
        if let Ok(spec) = solve_qtilde(&params) {
            prop_assert!(spec.strict_max_eig < -STRICT_TOLERANCE);
            prop_assert!(spec.semi_max_eig <= SEMIDEFINITE_TOLERANCE);
            prop_assert!(linalg::sym_eig_range(&spec.q_tilde).0 > 0.0);
            prop_assert!((spec.q_tilde.iter().map(|v| v.abs()).sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn flow_norm_is_bounded_by_growth(seed in any::<u64>(), s in 0.0f64..1.0, len in 0.0f64..1.0) {
        let params = common::random_params(seed, 4);
        let d = params.dim();
        let x0: Vec<f64> = seeded_normals(seed, d);
        let path = simulate_mollified_path(&params, 0.05, &x0, 0.01, 200, seed).unwrap();
        let t = s + len;
        let c_op = params.growth_constants().c_op;
        for mode in [FlowMode::Exponential, FlowMode::Euler] {
            let j = jacobian_flow(&params, &path, s, t, mode).unwrap();
            let k = (t / 0.01).round() - (s / 0.01).round();
            let bound = (c_op * k * 0.01).exp();
            prop_assert!(linalg::op_norm(&j) <= bound * (1.0 + 1e-10));
        }
    }

    #[test]
    fn occupation_phi_has_the_integrand_as_second_derivative(y in -1.0f64..1.0, eps in 0.01f64..0.9) {
        let h = 1e-5;
        let (_, d1, d2) = occupation_phi_eps(y, eps).unwrap();
        let value = |y: f64| occupation_phi_eps(y, eps).unwrap().0;
        let slope = |y: f64| occupation_phi_eps(y, eps).unwrap().1;
        prop_assert!(((value(y + h) - value(y - h)) / (2.0 * h) - d1).abs() < 1e-6);
        prop_assert!(((slope(y + h) - slope(y - h)) / (2.0 * h) - d2).abs() < 1e-4);
        prop_assert_eq!(d2, occupation_integrand(y, eps));
    }

    #[test]
    fn phi_spline_derivatives(z in -1.5f64..0.5) {
        let h = 1e-6;
        let (_, d1, d2) = PhiSpline::eval(z);
        let fd1 = (PhiSpline::value(z + h) - PhiSpline::value(z - h)) / (2.0 * h);
        let fd2 = (PhiSpline::eval(z + h).1 - PhiSpline::eval(z - h).1) / (2.0 * h);
        prop_assert!((fd1 - d1).abs() < 1e-6);
        prop_assert!((fd2 - d2).abs() < 1e-4);
    }
}

#[test]
fn lyapunov_derivatives_match_finite_differences() {
    let mut checked = 0;
    for (seed, params) in (0..200).map(|s| (s, common::random_params(s, 4))) {
        let Ok(spec) = solve_qtilde(&params) else { continue };
        let d = params.dim();
        let y = DVector::from_vec(seeded_normals(seed ^ 0xABCD, d)) * 2.0;
        let (_, grad, hess) = lyapunov_value_grad_hess(&spec, &params, &y);
        let h = 1e-5;
        let mut fd_hess = DMatrix::zeros(d, d);
        for j in 0..d {
            let mut step = DVector::zeros(d);
            step[j] = h;
            let plus = lyapunov_value_grad_hess(&spec, &params, &(&y + &step));
            let minus = lyapunov_value_grad_hess(&spec, &params, &(&y - &step));
            let fd = (plus.0 - minus.0) / (2.0 * h);
            assert!((fd - grad[j]).abs() < 1e-6 * (1.0 + grad.amax()), "gradient {j}: {fd} vs {}", grad[j]);
            fd_hess.set_column(j, &((plus.1 - minus.1) / (2.0 * h)));
        }
        assert!((&fd_hess - &hess).amax() < 1e-5 * (1.0 + hess.amax()));
        checked += 1;
        if checked == 100 {
            break;
        }
    }
    assert_eq!(checked, 100, "too few feasible random models");
}

#[test]
fn two_phase_model_has_a_lyapunov_function() {
    let params = common::two_phase();
    let spec = solve_qtilde(&params).unwrap();
    assert!(spec.strict_max_eig < 0.0);
    assert!(spec.semi_max_eig <= SEMIDEFINITE_TOLERANCE);
}
