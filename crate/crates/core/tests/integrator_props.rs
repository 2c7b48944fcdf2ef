mod common;

use nalgebra::DVector;
use proptest::prelude::*;

use hwdiff::integrator::{
    em_step, one_step_log_density, plan_schedule, replica_rng, run_chain, run_replicas, EmChain, EmScheduleConfig,
    NullSink, ReplicaSet, ScalarTrace, StateTrace,
};

#[test]
fn replicas_match_independent_streams() {
    let params = common::two_phase();
    let cfg = EmScheduleConfig::new(0.01, 500, 100, 9, vec![0.5, -0.5]);
    let out = run_replicas(&params, &cfg, 8, |_| NullSink).unwrap();
    for (i, fin) in out.finals.iter().enumerate() {
        let mut chain = EmChain::new(&params, &params, 0.01, &[0.5, -0.5], replica_rng(9, i as u64));
        for _ in 0..500 {
            chain.step().unwrap();
        }
        assert_eq!(chain.state(), fin.as_slice());
    }
}

#[test]
fn single_chain_is_replica_zero() {
    let params = common::benchmark();
    let cfg = EmScheduleConfig::new(0.01, 300, 0, 5, vec![0.0]);
    let single = run_chain(&params, &cfg, &mut NullSink).unwrap();
    let set = run_replicas(&params, &cfg, 3, |_| NullSink).unwrap();
    assert_eq!(single.final_state, set.finals[0]);
}

#[test]
fn checkpointing_does_not_change_the_path() {
    let params = common::two_phase();
    let cfg = EmScheduleConfig::new(0.02, 1000, 200, 3, vec![0.0, 0.0]);
    let mut whole = ReplicaSet::new(&params, &cfg, 2, |_| StateTrace::new(2)).unwrap();
    whole.advance_to(1000).unwrap();
    let mut pieces = ReplicaSet::new(&params, &cfg, 2, |_| StateTrace::new(2)).unwrap();
    for target in [1, 150, 200, 201, 640, 1000, 5000] {
        pieces.advance_to(target).unwrap();
    }
    assert_eq!(pieces.steps(), 1000);
    for (a, b) in whole.into_sinks().iter().zip(pieces.into_sinks().iter()) {
        assert_eq!(a.len(), 800);
        assert!(a.states().eq(b.states()));
    }
}

#[test]
fn empty_run_reports_the_start() {
    let params = common::benchmark();
    let cfg = EmScheduleConfig::new(0.01, 0, 0, 1, vec![0.7]);
    let mut trace = StateTrace::new(1);
    let summary = run_chain(&params, &cfg, &mut trace).unwrap();
    assert!(trace.is_empty());
    assert_eq!(summary.final_state, vec![0.7]);
}

#[test]
fn one_step_density_matches_gaussian_oracle() {
    let params = common::two_phase();
    let eta = 0.05;
    let x = DVector::from_vec(vec![0.4, -1.0]);
    let cov = &params.sigma * eta;
    let chol = cov.clone().cholesky().unwrap();
    let mean = &x + params.drift(&x) * eta;
    let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    for k in 0..10 {
        let y = &mean + DVector::from_vec(vec![0.1 * k as f64, -0.05 * k as f64]);
        let r = &y - &mean;
        let quad = r.dot(&chol.solve(&r));
        let oracle = -0.5 * (quad + log_det + 2.0 * (2.0 * std::f64::consts::PI).ln());
        let got = one_step_log_density(&params, &x, &y, eta);
        assert!((got - oracle).abs() <= 1e-10 * (1.0 + oracle.abs()), "{got} vs {oracle}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn em_step_is_affine_in_the_noise(seed in any::<u64>(), a in any::<u64>()) {
        let params = common::random_params(seed, 4);
        let d = params.dim();
        let x = DVector::from_vec(hwdiff::ergodic::seeded_normals(a, d));
        let xi = DVector::from_vec(hwdiff::ergodic::seeded_normals(a ^ 1, d));
        let eta = 0.01;
        let y = em_step(&params, &x, eta, &xi).unwrap();
        let expect = &x + params.drift(&x) * eta + &params.sigma_factor * &xi * eta.sqrt();
        prop_assert!((y - expect).amax() <= 1e-12);
    }

    #[test]
    fn chains_do_not_blow_up(seed in any::<u64>()) {
        let params = common::random_params(seed, 4);
        let d = params.dim();
        let cfg = EmScheduleConfig::new(0.02, 20_000, 0, seed, vec![0.0; d]);
        let mut norms = ScalarTrace::new(|x: &[f64]| x.iter().map(|v| v * v).sum::<f64>().sqrt());
        run_chain(&params, &cfg, &mut norms).unwrap();
        let worst = norms.values.iter().copied().fold(0.0, f64::max);
        let scale = params.sigma.trace().sqrt() + params.beta().abs();
        prop_assert!(worst.is_finite());
        prop_assert!(worst <= 200.0 * scale, "max |x| = {} vs scale {}", worst, scale);
    }

    #[test]
    fn schedule_follows_its_formulas(delta in 1e-3f64..0.5, varsigma in 0.01f64..0.9, safety in 1.0f64..100.0) {
        let n = safety * delta.powf(2.0 / (varsigma - 1.0)) * delta.ln().abs();
        if n > u64::MAX as f64 {
            prop_assert!(plan_schedule(delta, varsigma, safety).is_err());
            return Ok(());
        }
        let s = plan_schedule(delta, varsigma, safety).unwrap();
        prop_assert!((s.eta - delta.powf(2.0 / (1.0 - varsigma))).abs() <= 1e-15 * s.eta.max(1e-300));
        prop_assert!(s.n_steps as f64 >= n && (s.n_steps as f64) <= n * (1.0 + 1e-15) + 1.0);
    }
}
