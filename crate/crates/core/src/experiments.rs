//! End-to-end pipelines shared by the command-line tool and the
//! acceptance suite: the one-dimensional W1 benchmark and its step-size
//! sweep, and the three-way variance study.

use rayon::prelude::*;
use serde::Serialize;

use crate::ergodic::{
    clt_normality_check, stein_series_solve, variance_autocovariance_pooled, variance_from_batch_means,
    variance_stein, BatchMeans, KsReport, Observable, SteinConfig, SteinPoint, VarianceEstimate,
};
use crate::error::{Error, Result};
use crate::integrator::{EmScheduleConfig, Merge, ReplicaSet, ScalarTrace, StateSink};
use crate::metrics::{rate_fit, w1_to_density, Benchmark1D, RateFit, QUANTILE_GRID};
use crate::model::DiffusionParams;

type Trace = ScalarTrace<fn(&[f64]) -> f64>;

/// Records `h` at every state and every `every`-th state itself.
struct StudySink {
    h: Observable,
    every: u64,
    seen: u64,
    values: Vec<f64>,
    states: Vec<Vec<f64>>,
}

impl StateSink for StudySink {
    fn observe(&mut self, x: &[f64]) {
        self.values.push(self.h.eval(x));
        if self.seen % self.every == 0 {
            self.states.push(x.to_vec());
        }
        self.seen += 1;
    }
}

impl Merge for StudySink {
    fn merge(mut self, other: Self) -> Self {
        self.values.extend(other.values);
        self.states.extend(other.states);
        self.seen += other.seen;
        self
    }
}

fn first_coordinate(x: &[f64]) -> f64 {
    x[0]
}

/// One long run of the scalar chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BenchmarkRun {
    pub eta: f64,
    /// Steps per replica, burn-in included.
    pub steps: u64,
    pub burn_in: u64,
    pub replicas: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchmarkPoint {
    pub eta: f64,
    pub steps: u64,
    pub burn_in: u64,
    pub replicas: usize,
    pub samples: usize,
    /// W1 between the pooled empirical measure and the exact density.
    pub w1: f64,
    /// Spread of the per-replica distances over `sqrt(replicas)`.
    pub std_error: f64,
    pub replica_w1: Vec<f64>,
}

fn check_scalar(params: &DiffusionParams) -> Result<()> {
    if params.dim() != 1 {
        return Err(Error::DimensionMismatch { expected: 1, got: params.dim() });
    }
    Ok(())
}

/// Recorded first coordinates of each replica, in replica order.
pub fn scalar_traces(params: &DiffusionParams, run: &BenchmarkRun) -> Result<Vec<Vec<f64>>> {
    let cfg = EmScheduleConfig::new(run.eta, run.steps, run.burn_in, run.seed, vec![0.0; params.dim()]);
    let mut set = ReplicaSet::new(params, &cfg, run.replicas, |_| Trace::new(first_coordinate as fn(&[f64]) -> f64))?;
    set.advance_to(run.steps)?;
    Ok(set.into_sinks().into_iter().map(|s| s.values).collect())
}

/// Runs the chain and compares its empirical measure with `bench`.
pub fn benchmark_point(params: &DiffusionParams, bench: &Benchmark1D, run: &BenchmarkRun) -> Result<BenchmarkPoint> {
    check_scalar(params)?;
    let traces = scalar_traces(params, run)?;
    let replica_w1: Vec<f64> =
        traces.par_iter().map(|t| w1_to_density(t, bench, QUANTILE_GRID)).collect::<Result<_>>()?;
    let pooled = traces.concat();
    let w1 = w1_to_density(&pooled, bench, QUANTILE_GRID)?;
    let r = replica_w1.len() as f64;
    let std_error = if replica_w1.len() > 1 {
        let m = replica_w1.iter().sum::<f64>() / r;
        (replica_w1.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (r - 1.0) / r).sqrt()
    } else {
        f64::NAN
    };
    Ok(BenchmarkPoint {
        eta: run.eta,
        steps: run.steps,
        burn_in: run.burn_in,
        replicas: run.replicas,
        samples: pooled.len(),
        w1,
        std_error,
        replica_w1,
    })
}

/// Step-size sweep with a simulated horizon that is the same for every
/// step size, so the sample count grows like `1 / eta`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepConfig {
    pub etas: Vec<f64>,
    /// Recorded time per replica.
    pub horizon: f64,
    /// Discarded time per replica.
    pub burn_in_time: f64,
    /// Recorded steps per replica for every step size; `None` uses
    /// `horizon / eta`.
    pub recorded_steps: Option<u64>,
    pub replicas: usize,
    pub seed: u64,
}

impl SweepConfig {
    pub fn run_for(&self, eta: f64) -> BenchmarkRun {
        let burn_in = (self.burn_in_time / eta).ceil() as u64;
        BenchmarkRun {
            eta,
            steps: burn_in + self.recorded_steps.unwrap_or((self.horizon / eta).ceil() as u64),
            burn_in,
            replicas: self.replicas,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepReport {
    pub points: Vec<BenchmarkPoint>,
    pub fit: RateFit,
    /// Every distance is at most the previous (larger-eta) one plus both error bars.
    pub monotone: bool,
}

pub fn benchmark_sweep(params: &DiffusionParams, bench: &Benchmark1D, cfg: &SweepConfig) -> Result<SweepReport> {
    let mut etas = cfg.etas.clone();
    etas.sort_by(|a, b| b.total_cmp(a));
    let points = etas
        .iter()
        .map(|&eta| benchmark_point(params, bench, &cfg.run_for(eta)))
        .collect::<Result<Vec<_>>>()?;
    let fit = rate_fit(&points.iter().map(|p| (p.eta, p.w1)).collect::<Vec<_>>())?;
    let monotone = points
        .windows(2)
        .all(|w| w[1].w1 <= w[0].w1 + w[0].std_error.max(0.0) + w[1].std_error.max(0.0));
    Ok(SweepReport { points, fit, monotone })
}

/// Settings of [`variance_study`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VarianceStudyConfig {
    pub observable: Observable,
    pub eta: f64,
    pub steps: u64,
    pub burn_in: u64,
    pub replicas: usize,
    pub seed: u64,
    /// Batch length in steps.
    pub batch_len: usize,
    pub max_lag: usize,
    /// Stationary starting points for the Stein estimator (0 disables it).
    pub stein_points: usize,
    pub stein_inner: usize,
    /// Series depth; `None` uses `ceil(10 / (rate eta))` with the rate
    /// fitted from the autocorrelation decay.
    pub stein_depth: Option<usize>,
    /// Query points of the residual check.
    pub residual_points: usize,
    pub residual_inner: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VarianceStudy {
    pub observable: Observable,
    pub eta: f64,
    pub samples: usize,
    pub mean: f64,
    pub batch_means: VarianceEstimate,
    pub autocovariance: VarianceEstimate,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stein: Option<VarianceEstimate>,
    /// Correlation decay rate per unit time used for the series depth.
    pub decay_rate: f64,
    pub residuals: Vec<SteinPoint>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub normality: Option<KsReport>,
}

/// Decay rate per unit time from the lag where the autocorrelation of the
/// pooled streams first drops below `1/e`.
fn decay_rate(streams: &[&[f64]], eta: f64, max_lag: usize) -> f64 {
    let c = crate::ergodic::autocovariances(streams, max_lag);
    if c[0] <= 0.0 {
        return 1.0;
    }
    let lag = c.iter().position(|&v| v / c[0] < (-1.0f64).exp()).unwrap_or(max_lag).max(1);
    1.0 / (lag as f64 * eta)
}

/// Estimates the asymptotic variance of `observable` three ways on
/// replicated runs: pooled batch means, pooled truncated autocovariances
/// and (optionally) the Stein series started from evenly spaced recorded
/// states.
pub fn variance_study(params: &DiffusionParams, cfg: &VarianceStudyConfig) -> Result<VarianceStudy> {
    cfg.observable.check_dim(params.dim())?;
    let cfg_run = EmScheduleConfig::new(cfg.eta, cfg.steps, cfg.burn_in, cfg.seed, vec![0.0; params.dim()]);
    let h = cfg.observable;
    let every = (cfg.steps - cfg.burn_in).div_ceil(cfg.stein_points.max(cfg.residual_points).max(1) as u64).max(1);
    let mut set = ReplicaSet::new(params, &cfg_run, cfg.replicas, |_| StudySink {
        h,
        every,
        seen: 0,
        values: Vec::new(),
        states: Vec::new(),
    })?;
    set.advance_to(cfg.steps)?;
    let sinks = set.into_sinks();
    let slices: Vec<&[f64]> = sinks.iter().map(|s| s.values.as_slice()).collect();
    let samples: usize = slices.iter().map(|s| s.len()).sum();
    let mean = slices.iter().flat_map(|s| s.iter()).sum::<f64>() / samples as f64;

    let means: Vec<f64> = slices
        .iter()
        .flat_map(|s| s.chunks_exact(cfg.batch_len).map(|c| c.iter().sum::<f64>() / c.len() as f64))
        .collect();
    let bm: BatchMeans = variance_from_batch_means(&means, cfg.batch_len)?;
    let normality = clt_normality_check(&bm.standardized).ok();
    let ac = variance_autocovariance_pooled(&slices, cfg.max_lag)?;
    let rate = decay_rate(&slices, cfg.eta, cfg.max_lag);

    // Evenly spaced recorded states, interleaved across replicas.
    let pick = |count: usize| -> Vec<Vec<f64>> {
        let longest = sinks.iter().map(|s| s.states.len()).max().unwrap_or(0);
        let pool: Vec<&Vec<f64>> =
            (0..longest).flat_map(|i| sinks.iter().filter_map(move |s| s.states.get(i))).collect();
        (0..count.min(pool.len())).map(|i| pool[i * pool.len() / count].clone()).collect()
    };
    let depth = cfg.stein_depth.unwrap_or_else(|| SteinConfig::default_depth(rate, cfg.eta));
    let stein_cfg = |inner: usize, seed: u64| SteinConfig {
        eta: cfg.eta,
        depth,
        n_inner: inner,
        seed,
        rate: None,
        tolerance: 1.0,
    };
    let stein = if cfg.stein_points > 1 {
        Some(variance_stein(params, &stein_cfg(cfg.stein_inner, cfg.seed ^ 0x57E1), &h, mean, &pick(cfg.stein_points))?)
    } else {
        None
    };
    let residuals = if cfg.residual_points > 0 {
        stein_series_solve(params, &stein_cfg(cfg.residual_inner, cfg.seed ^ 0x2E51), &h, mean, &pick(cfg.residual_points))?
    } else {
        Vec::new()
    };
    Ok(VarianceStudy {
        observable: h,
        eta: cfg.eta,
        samples,
        mean,
        batch_means: bm.variance,
        autocovariance: ac,
        stein,
        decay_rate: rate,
        residuals,
        normality,
    })
}
