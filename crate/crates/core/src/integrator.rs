//! The Euler-Maruyama chain
//!
//! ```text
//! X_{k+1} = X_k + g(X_k) eta + sqrt(eta) sigma xi_{k+1}
//! ```
//!
//! together with the step-size/iteration planner that targets a
//! Wasserstein-1 error `delta`, and reproducible parallel replicas.
//!
//! Randomness comes from ChaCha8 streams: replica `i` of a run seeded with
//! `seed` uses stream `i` of the generator keyed by `seed`, so replicas are
//! independent and replica 0 is exactly the single-chain run.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::dynamics::MollifiedDrift;
use crate::error::{Error, Result};
use crate::linalg::matvec_into;
use crate::model::DiffusionParams;

/// Default multiplier on the order-of-magnitude iteration count.
pub const DEFAULT_SAFETY: f64 = 10.0;

/// Step size and iteration count for a target error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Schedule {
    pub eta: f64,
    pub n_steps: u64,
    pub delta: f64,
    pub varsigma: f64,
    pub safety: f64,
}

/// `eta = delta^(2/(1-varsigma))`, `N = ceil(K delta^(2/(varsigma-1)) |ln delta|)`.
///
/// `K` (`safety`) stands in for the unknown constant hidden in the order
/// bound.
pub fn plan_schedule(delta: f64, varsigma: f64, safety: f64) -> Result<Schedule> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::BadDelta(delta));
    }
    if !(varsigma > 0.0 && varsigma < 1.0) {
        return Err(Error::BadVarsigma(varsigma));
    }
    if !(safety >= 1.0 && safety.is_finite()) {
        return Err(Error::InvalidConfig(format!("safety factor must be >= 1, got {safety}")));
    }
    let eta = delta.powf(2.0 / (1.0 - varsigma));
    let n = (safety * delta.powf(2.0 / (varsigma - 1.0)) * delta.ln().abs()).ceil();
    if !(n.is_finite() && n <= u64::MAX as f64) {
        return Err(Error::BadDelta(delta));
    }
    Ok(Schedule { eta, n_steps: n as u64, delta, varsigma, safety })
}

/// Burn-in heuristic: `min(N/10, 10/(c1 eta))` when a drift rate `c1` is
/// known, `N/10` otherwise.
pub fn default_burn_in(n_steps: u64, eta: f64, c1: Option<f64>) -> u64 {
    let tenth = n_steps / 10;
    match c1 {
        Some(c) if c > 0.0 => tenth.min((10.0 / (c * eta)).ceil() as u64),
        _ => tenth,
    }
}

/// Configuration of one Euler-Maruyama run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmScheduleConfig {
    pub eta: f64,
    pub n_steps: u64,
    /// Leading steps whose states are not passed to the sink.
    pub burn_in: u64,
    pub seed: u64,
    pub x0: Vec<f64>,
}

impl EmScheduleConfig {
    pub fn new(eta: f64, n_steps: u64, burn_in: u64, seed: u64, x0: Vec<f64>) -> Self {
        EmScheduleConfig { eta, n_steps, burn_in, seed, x0 }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return Err(Error::InvalidConfig(format!("step size must lie in (0, 1), got {}", self.eta)));
        }
        if self.burn_in >= self.n_steps && !(self.n_steps == 0 && self.burn_in == 0) {
            return Err(Error::InvalidConfig(format!(
                "burn-in {} must be smaller than the step count {}",
                self.burn_in, self.n_steps
            )));
        }
        if self.x0.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: self.x0.len() });
        }
        if self.x0.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidConfig("initial state must be finite".into()));
        }
        Ok(())
    }

    /// Number of states the sink receives.
    pub fn recorded(&self) -> u64 {
        self.n_steps - self.burn_in
    }
}

/// A vector field that can drive the chain.
pub trait Drift: Sync {
    fn dim(&self) -> usize;
    fn drift_into(&self, x: &[f64], out: &mut [f64]);
}

impl Drift for DiffusionParams {
    fn dim(&self) -> usize {
        DiffusionParams::dim(self)
    }
    #[inline]
    fn drift_into(&self, x: &[f64], out: &mut [f64]) {
        DiffusionParams::drift_into(self, x, out)
    }
}

impl Drift for MollifiedDrift<'_> {
    fn dim(&self) -> usize {
        self.params.dim()
    }
    #[inline]
    fn drift_into(&self, x: &[f64], out: &mut [f64]) {
        MollifiedDrift::drift_into(self, x, out)
    }
}

/// Receives the recorded states of a chain.
pub trait StateSink {
    fn observe(&mut self, x: &[f64]);
}

/// Combines statistics from independent replicas.
pub trait Merge {
    fn merge(self, other: Self) -> Self;
}

/// Sink that discards everything.
#[derive(Debug, Default, Clone, Copy)]
pub struct NullSink;

impl StateSink for NullSink {
    fn observe(&mut self, _: &[f64]) {}
}

impl Merge for NullSink {
    fn merge(self, _: Self) -> Self {
        NullSink
    }
}

/// Sink storing every state, flattened row-major.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct StateTrace {
    pub dim: usize,
    pub data: Vec<f64>,
}

impl StateTrace {
    pub fn new(dim: usize) -> Self {
        StateTrace { dim, data: Vec::new() }
    }

    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn states(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim.max(1))
    }
}

impl StateSink for StateTrace {
    fn observe(&mut self, x: &[f64]) {
        self.data.extend_from_slice(x);
    }
}

impl Merge for StateTrace {
    fn merge(mut self, other: Self) -> Self {
        if self.data.is_empty() {
            return other;
        }
        self.data.extend_from_slice(&other.data);
        self
    }
}

/// Sink storing `h(x)` for a scalar function `h`.
pub struct ScalarTrace<F> {
    pub f: F,
    pub values: Vec<f64>,
}

impl<F: Fn(&[f64]) -> f64> ScalarTrace<F> {
    pub fn new(f: F) -> Self {
        ScalarTrace { f, values: Vec::new() }
    }
}

impl<F: Fn(&[f64]) -> f64> StateSink for ScalarTrace<F> {
    fn observe(&mut self, x: &[f64]) {
        self.values.push((self.f)(x));
    }
}

impl<F> Merge for ScalarTrace<F> {
    fn merge(mut self, other: Self) -> Self {
        self.values.extend(other.values);
        self
    }
}

impl<A: StateSink, B: StateSink> StateSink for (A, B) {
    fn observe(&mut self, x: &[f64]) {
        self.0.observe(x);
        self.1.observe(x);
    }
}

impl<A: Merge, B: Merge> Merge for (A, B) {
    fn merge(self, other: Self) -> Self {
        (self.0.merge(other.0), self.1.merge(other.1))
    }
}

/// Generator for replica `stream` of a run seeded with `seed`.
pub fn replica_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One Euler-Maruyama step with a caller-supplied standard normal vector.
pub fn em_step(params: &DiffusionParams, x: &DVector<f64>, eta: f64, xi: &DVector<f64>) -> Result<DVector<f64>> {
    let d = params.dim();
    if x.len() != d {
        return Err(Error::DimensionMismatch { expected: d, got: x.len() });
    }
    if xi.len() != d {
        return Err(Error::DimensionMismatch { expected: d, got: xi.len() });
    }
    let next = x + params.drift(x) * eta + &params.sigma_factor * xi * eta.sqrt();
    if next.iter().all(|v| v.is_finite()) {
        Ok(next)
    } else {
        Err(Error::NonFinite { step: 1 })
    }
}

/// Log of the one-step transition density: `X_1` given `X_0 = x` is
/// Gaussian with mean `x + eta g(x)` and covariance `eta sigma sigma'`.
pub fn one_step_log_density(params: &DiffusionParams, x: &DVector<f64>, y: &DVector<f64>, eta: f64) -> f64 {
    let d = params.dim() as f64;
    let r = y - x - params.drift(x) * eta;
    let z = &params.sigma_factor_inv * r;
    let log_det = params.sigma.determinant().ln();
    -0.5 * (d * (2.0 * std::f64::consts::PI * eta).ln() + log_det + z.norm_squared() / eta)
}

/// A running Euler-Maruyama chain with its own random stream.
pub struct EmChain<'a, D: Drift> {
    drift: &'a D,
    sigma: &'a [f64],
    eta: f64,
    sqrt_eta: f64,
    state: Vec<f64>,
    rng: ChaCha8Rng,
    step: u64,
    g: Vec<f64>,
    xi: Vec<f64>,
    noise: Vec<f64>,
}

impl<'a, D: Drift> EmChain<'a, D> {
    pub fn new(drift: &'a D, params: &'a DiffusionParams, eta: f64, x0: &[f64], rng: ChaCha8Rng) -> Self {
        let d = drift.dim();
        assert_eq!(x0.len(), d, "initial state has wrong dimension");
        EmChain {
            drift,
            sigma: params.sigma_factor.as_slice(),
            eta,
            sqrt_eta: eta.sqrt(),
            state: x0.to_vec(),
            rng,
            step: 0,
            g: vec![0.0; d],
            xi: vec![0.0; d],
            noise: vec![0.0; d],
        }
    }

    pub fn state(&self) -> &[f64] {
        &self.state
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    /// Advances one step and returns the standard normal vector `xi` that
    /// drove it (the Brownian increment is `sqrt(eta) xi`).
    #[inline]
    pub fn step(&mut self) -> Result<&[f64]> {
        let d = self.state.len();
        for z in self.xi.iter_mut() {
            *z = self.rng.sample(StandardNormal);
        }
        self.drift.drift_into(&self.state, &mut self.g);
        matvec_into(self.sigma, d, &self.xi, &mut self.noise);
        let mut finite = true;
        for ((x, &g), &n) in self.state.iter_mut().zip(&self.g).zip(&self.noise) {
            *x += g * self.eta + self.sqrt_eta * n;
            finite &= x.is_finite();
        }
        self.step += 1;
        if finite {
            Ok(&self.xi)
        } else {
            Err(Error::NonFinite { step: self.step })
        }
    }

    /// Runs `n` steps, passing every state after step `record_after` to `sink`.
    pub fn advance<S: StateSink>(&mut self, n: u64, record_after: u64, sink: &mut S) -> Result<()> {
        for _ in 0..n {
            self.step()?;
            if self.step > record_after {
                sink.observe(&self.state);
            }
        }
        Ok(())
    }
}

/// Outcome of a single chain.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChainSummary {
    pub steps: u64,
    pub recorded: u64,
    pub final_state: Vec<f64>,
    pub seed: u64,
    pub eta: f64,
}

/// Runs one chain on stream 0 of `cfg.seed`.
pub fn run_chain<S: StateSink>(params: &DiffusionParams, cfg: &EmScheduleConfig, sink: &mut S) -> Result<ChainSummary> {
    run_stream(params, cfg, 0, sink)
}

fn run_stream<S: StateSink>(
    params: &DiffusionParams,
    cfg: &EmScheduleConfig,
    stream: u64,
    sink: &mut S,
) -> Result<ChainSummary> {
    cfg.validate(params.dim())?;
    let mut chain = EmChain::new(params, params, cfg.eta, &cfg.x0, replica_rng(cfg.seed, stream));
    chain.advance(cfg.n_steps, cfg.burn_in, sink)?;
    Ok(ChainSummary {
        steps: cfg.n_steps,
        recorded: cfg.recorded(),
        final_state: chain.state().to_vec(),
        seed: cfg.seed,
        eta: cfg.eta,
    })
}

/// Merged statistics of a replica run and the final state of every replica.
#[derive(Debug, Clone)]
pub struct ReplicaOutput<S> {
    pub merged: S,
    pub finals: Vec<Vec<f64>>,
}

/// Runs `n_replicas` independent chains (replica `i` on stream `i`) on the
/// current rayon pool and merges their sinks in replica order, so the result
/// does not depend on scheduling.
pub fn run_replicas<S, F>(
    params: &DiffusionParams,
    cfg: &EmScheduleConfig,
    n_replicas: usize,
    make_sink: F,
) -> Result<ReplicaOutput<S>>
where
    S: StateSink + Merge + Send,
    F: Fn(usize) -> S + Sync,
{
    let mut set = ReplicaSet::new(params, cfg, n_replicas, make_sink)?;
    set.advance_to(cfg.n_steps)?;
    Ok(set.finish())
}

/// Replicas advanced in lock-step segments, for checkpointed runs.
pub struct ReplicaSet<'a, S> {
    chains: Vec<EmChain<'a, DiffusionParams>>,
    sinks: Vec<S>,
    burn_in: u64,
    n_steps: u64,
}

impl<'a, S: StateSink + Merge + Send> ReplicaSet<'a, S> {
    pub fn new<F>(params: &'a DiffusionParams, cfg: &EmScheduleConfig, n_replicas: usize, make_sink: F) -> Result<Self>
    where
        F: Fn(usize) -> S,
    {
        cfg.validate(params.dim())?;
        if n_replicas == 0 {
            return Err(Error::InvalidConfig("need at least one replica".into()));
        }
        let chains = (0..n_replicas)
            .map(|i| EmChain::new(params, params, cfg.eta, &cfg.x0, replica_rng(cfg.seed, i as u64)))
            .collect();
        let sinks = (0..n_replicas).map(make_sink).collect();
        Ok(ReplicaSet { chains, sinks, burn_in: cfg.burn_in, n_steps: cfg.n_steps })
    }

    /// Steps completed by every replica.
    pub fn steps(&self) -> u64 {
        self.chains[0].steps_taken()
    }

    /// Advances all replicas in parallel until they have taken `target`
    /// steps (capped at the configured total).
    pub fn advance_to(&mut self, target: u64) -> Result<()> {
        let target = target.min(self.n_steps);
        let burn_in = self.burn_in;
        self.chains
            .par_iter_mut()
            .zip(self.sinks.par_iter_mut())
            .map(|(chain, sink)| {
                let n = target.saturating_sub(chain.steps_taken());
                chain.advance(n, burn_in, sink)
            })
            .collect::<Vec<_>>()
            .into_iter()
            .collect::<Result<()>>()
    }

    pub fn sinks(&self) -> &[S] {
        &self.sinks
    }

    pub fn finals(&self) -> Vec<Vec<f64>> {
        self.chains.iter().map(|c| c.state().to_vec()).collect()
    }

    /// The per-replica sinks, unmerged, in replica order.
    pub fn into_sinks(self) -> Vec<S> {
        self.sinks
    }

    pub fn finish(self) -> ReplicaOutput<S> {
        let finals = self.finals();
        let merged = self
            .sinks
            .into_iter()
            .reduce(Merge::merge)
            .expect("replica set is never empty");
        ReplicaOutput { merged, finals }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{derive_params, PhaseTypeModel};
    use approx::assert_relative_eq;

    fn bench(alpha: f64) -> DiffusionParams {
        derive_params(&PhaseTypeModel::single_phase(alpha, 1.0, 1.0), false).unwrap()
    }

    #[test]
    fn schedule_reference_values() {
        let s = plan_schedule(0.1, 0.2, 1.0).unwrap();
        assert_relative_eq!(s.eta, 3.1622776601683795e-3, epsilon = 1e-15);
        assert_eq!(s.n_steps, 729);
        let s = plan_schedule(0.01, 0.2, 1.0).unwrap();
        assert_relative_eq!(s.eta, 1e-5, max_relative = 1e-12);
        assert_eq!(s.n_steps, 460_518);
    }

    #[test]
    fn schedule_rejects_bad_inputs() {
        assert!(matches!(plan_schedule(1.0, 0.2, 1.0), Err(Error::BadDelta(_))));
        assert!(matches!(plan_schedule(0.0, 0.2, 1.0), Err(Error::BadDelta(_))));
        assert!(matches!(plan_schedule(0.1, 1.0, 1.0), Err(Error::BadVarsigma(_))));
        assert!(matches!(plan_schedule(0.1, 0.0, 1.0), Err(Error::BadVarsigma(_))));
        assert!(plan_schedule(0.1, 0.2, 0.5).is_err());
    }

    #[test]
    fn burn_in_heuristic() {
        assert_eq!(default_burn_in(1_000_000, 1e-3, None), 100_000);
        assert_eq!(default_burn_in(1_000_000, 1e-3, Some(1.0)), 10_000);
        assert_eq!(default_burn_in(1_000, 1e-3, Some(1.0)), 100);
    }

    #[test]
    fn deterministic_em_step() {
        let params = derive_params(&PhaseTypeModel::single_phase(1.0, 1.0, 1.0), false).unwrap();
        let x = DVector::from_element(1, 0.0);
        let xi = DVector::from_element(1, 0.0);
        assert_relative_eq!(em_step(&params, &x, 0.01, &xi).unwrap()[0], -0.01, epsilon = 1e-16);
        let x = DVector::from_element(1, -2.0);
        let expected = -2.0 + (-1.0 + 2.0) * 0.01;
        assert_relative_eq!(em_step(&params, &x, 0.01, &xi).unwrap()[0], expected, epsilon = 1e-15);
    }

    #[test]
    fn empty_run_reports_initial_state() {
        let params = bench(0.5);
        let cfg = EmScheduleConfig::new(1e-3, 0, 0, 1, vec![0.25]);
        let mut trace = StateTrace::new(1);
        let summary = run_chain(&params, &cfg, &mut trace).unwrap();
        assert!(trace.is_empty());
        assert_eq!(summary.final_state, vec![0.25]);
    }

    #[test]
    fn identical_configs_give_identical_traces() {
        let params = bench(0.5);
        let cfg = EmScheduleConfig::new(1e-2, 5_000, 100, 42, vec![0.0]);
        let mut a = StateTrace::new(1);
        let mut b = StateTrace::new(1);
        run_chain(&params, &cfg, &mut a).unwrap();
        run_chain(&params, &cfg, &mut b).unwrap();
        assert_eq!(a.data.len(), 4_900);
        assert_eq!(a, b);
    }

    #[test]
    fn single_replica_equals_run_chain() {
        let params = bench(0.5);
        let cfg = EmScheduleConfig::new(1e-2, 2_000, 10, 9, vec![1.0]);
        let mut direct = StateTrace::new(1);
        run_chain(&params, &cfg, &mut direct).unwrap();
        let out = run_replicas(&params, &cfg, 1, |_| StateTrace::new(1)).unwrap();
        assert_eq!(out.merged, direct);
    }

    #[test]
    fn checkpointed_replicas_match_one_shot() {
        let params = bench(0.5);
        let cfg = EmScheduleConfig::new(1e-2, 3_000, 200, 5, vec![0.0]);
        let one_shot = run_replicas(&params, &cfg, 3, |_| StateTrace::new(1)).unwrap();
        let mut set = ReplicaSet::new(&params, &cfg, 3, |_| StateTrace::new(1)).unwrap();
        for target in (0..=3_000).step_by(700) {
            set.advance_to(target).unwrap();
        }
        set.advance_to(3_000).unwrap();
        let staged = set.finish();
        assert_eq!(staged.merged, one_shot.merged);
        assert_eq!(staged.finals, one_shot.finals);
    }

    #[test]
    fn config_validation() {
        let params = bench(0.5);
        let mut sink = NullSink;
        let bad_eta = EmScheduleConfig::new(1.5, 10, 0, 0, vec![0.0]);
        assert!(run_chain(&params, &bad_eta, &mut sink).is_err());
        let bad_burn = EmScheduleConfig::new(0.1, 10, 10, 0, vec![0.0]);
        assert!(run_chain(&params, &bad_burn, &mut sink).is_err());
        let bad_dim = EmScheduleConfig::new(0.1, 10, 0, 0, vec![0.0, 1.0]);
        assert!(matches!(run_chain(&params, &bad_dim, &mut sink), Err(Error::DimensionMismatch { .. })));
    }
}
