//! Ergodic averages of the chain and the asymptotic variance of their
//! fluctuations.
//!
//! For a bounded observable `h`, `sqrt(n) (E_n(h) - mu_eta(h))` is
//! asymptotically normal with variance
//!
//! ```text
//! V(h) = <h - mu(h), h - mu(h)> + 2 sum_{k>=1} <P^k h, h - mu(h)>
//!      = <f, f> - <P f, P f>,      f = -sum_{k>=0} P^k (h - mu(h)),
//! ```
//!
//! where `P` is the one-step transition operator. Three estimators are
//! provided: batch means, a truncated autocovariance sum (initial positive
//! sequence cut-off) and a Monte Carlo evaluation of the discrete Poisson
//! (Stein) series `f`. All three estimate the per-step variance; multiply
//! by `eta` for the continuous-time diffusion variance.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::integrator::{replica_rng, EmChain, Merge, StateSink};
use crate::model::DiffusionParams;

/// Bounded (and a few unbounded, for validation) test functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(into = "String")]
pub enum Observable {
    /// `tanh(e'x)`.
    TanhSum,
    /// `1{e'x > 0}`.
    IndicatorPositive,
    /// `tanh(x_i)`.
    CoordinateTanh(usize),
    /// `e'x` (unbounded).
    Sum,
    /// `x_i` (unbounded).
    Coordinate(usize),
}

impl Observable {
    #[inline]
    pub fn eval(&self, x: &[f64]) -> f64 {
        match *self {
            Observable::TanhSum => x.iter().sum::<f64>().tanh(),
            Observable::IndicatorPositive => {
                if x.iter().sum::<f64>() > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Observable::CoordinateTanh(i) => x[i].tanh(),
            Observable::Sum => x.iter().sum(),
            Observable::Coordinate(i) => x[i],
        }
    }

    pub fn is_bounded(&self) -> bool {
        !matches!(self, Observable::Sum | Observable::Coordinate(_))
    }

    /// Lipschitz constant in `x` when one exists.
    pub fn lipschitz(&self, dim: usize) -> Option<f64> {
        match self {
            Observable::TanhSum | Observable::Sum => Some((dim as f64).sqrt()),
            Observable::CoordinateTanh(_) | Observable::Coordinate(_) => Some(1.0),
            Observable::IndicatorPositive => None,
        }
    }

    pub fn check_dim(&self, dim: usize) -> Result<()> {
        match *self {
            Observable::CoordinateTanh(i) | Observable::Coordinate(i) if i >= dim => {
                Err(Error::DimensionMismatch { expected: dim, got: i + 1 })
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for Observable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Observable::TanhSum => write!(f, "tanh-sum"),
            Observable::IndicatorPositive => write!(f, "indicator-positive"),
            Observable::CoordinateTanh(i) => write!(f, "coordinate-tanh-{i}"),
            Observable::Sum => write!(f, "sum"),
            Observable::Coordinate(i) => write!(f, "coordinate-{i}"),
        }
    }
}

impl From<Observable> for String {
    fn from(o: Observable) -> String {
        o.to_string()
    }
}

impl FromStr for Observable {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let index = |rest: &str| {
            rest.parse::<usize>()
                .map_err(|_| Error::InvalidConfig(format!("bad coordinate index in {s:?}")))
        };
        match s {
            "tanh-sum" => Ok(Observable::TanhSum),
            "indicator-positive" => Ok(Observable::IndicatorPositive),
            "sum" => Ok(Observable::Sum),
            _ => {
                if let Some(rest) = s.strip_prefix("coordinate-tanh-") {
                    Ok(Observable::CoordinateTanh(index(rest)?))
                } else if let Some(rest) = s.strip_prefix("coordinate-") {
                    Ok(Observable::Coordinate(index(rest)?))
                } else {
                    Err(Error::InvalidConfig(format!("unknown observable {s:?}")))
                }
            }
        }
    }
}

/// Fixed-width histogram with explicit under/overflow counts.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
    pub underflow: u64,
    pub overflow: u64,
}

/// Default histogram resolution.
pub const DEFAULT_BINS: usize = 512;

impl Histogram {
    pub fn new(lo: f64, hi: f64, bins: usize) -> Result<Self> {
        if !(lo < hi && lo.is_finite() && hi.is_finite()) || bins == 0 {
            return Err(Error::InvalidConfig(format!("bad histogram range [{lo}, {hi}] with {bins} bins")));
        }
        Ok(Histogram { lo, hi, counts: vec![0; bins], underflow: 0, overflow: 0 })
    }

    /// Range `mean +- 8 std`, the default used after a pilot run.
    pub fn from_pilot(mean: f64, std: f64, bins: usize) -> Result<Self> {
        let half = 8.0 * std.max(1e-12);
        Histogram::new(mean - half, mean + half, bins)
    }

    pub fn bin_width(&self) -> f64 {
        (self.hi - self.lo) / self.counts.len() as f64
    }

    #[inline]
    pub fn add(&mut self, v: f64) {
        if v < self.lo {
            self.underflow += 1;
        } else if v >= self.hi {
            self.overflow += 1;
        } else {
            let n = self.counts.len();
            let i = ((v - self.lo) / self.bin_width()) as usize;
            self.counts[i.min(n - 1)] += 1;
        }
    }

    pub fn mass(&self) -> u64 {
        self.underflow + self.overflow + self.counts.iter().sum::<u64>()
    }

    pub fn merge(mut self, other: &Histogram) -> Self {
        assert!(
            self.lo == other.lo && self.hi == other.hi && self.counts.len() == other.counts.len(),
            "histograms must share their binning"
        );
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.underflow += other.underflow;
        self.overflow += other.overflow;
        self
    }
}

/// Uniform subsample of the observed states (Algorithm R).
#[derive(Debug, Clone)]
pub struct Reservoir {
    pub capacity: usize,
    pub seen: u64,
    dim: usize,
    items: Vec<f64>,
    rng: ChaCha8Rng,
}

impl Reservoir {
    pub fn new(capacity: usize, dim: usize, rng: ChaCha8Rng) -> Self {
        Reservoir { capacity, seen: 0, dim, items: Vec::new(), rng }
    }

    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.items.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn item(&self, i: usize) -> &[f64] {
        &self.items[i * self.dim..(i + 1) * self.dim]
    }

    pub fn items(&self) -> impl Iterator<Item = &[f64]> {
        self.items.chunks_exact(self.dim.max(1))
    }

    #[inline]
    pub fn observe(&mut self, x: &[f64]) {
        self.seen += 1;
        if self.capacity == 0 {
            return;
        }
        if self.len() < self.capacity {
            self.items.extend_from_slice(x);
        } else {
            let j = self.rng.random_range(0..self.seen);
            if (j as usize) < self.capacity {
                let j = j as usize;
                self.items[j * self.dim..(j + 1) * self.dim].copy_from_slice(x);
            }
        }
    }

    /// Merges two reservoirs into a uniform sample of the union: the number
    /// drawn from each side follows the hypergeometric law of sampling
    /// without replacement from `seen_a + seen_b` items.
    pub fn merge(mut self, other: Reservoir) -> Reservoir {
        assert_eq!(self.dim, other.dim, "reservoirs must share their dimension");
        let capacity = self.capacity.max(other.capacity);
        let total = self.seen + other.seen;
        let take = (capacity as u64).min(total) as usize;
        let mut left_a = self.seen;
        let mut from_a = 0usize;
        for i in 0..take {
            let remaining = total - i as u64;
            if self.rng.random_range(0..remaining) < left_a {
                from_a += 1;
                left_a -= 1;
            }
        }
        let from_b = take - from_a;
        let dim = self.dim;
        let pick = |items: &Vec<f64>, k: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
            let n = items.len() / dim.max(1);
            debug_assert!(k <= n);
            // Partial Fisher-Yates over item indices.
            let mut idx: Vec<usize> = (0..n).collect();
            for i in 0..k {
                let j = rng.random_range(i..n);
                idx.swap(i, j);
            }
            idx[..k].iter().flat_map(|&i| items[i * dim..(i + 1) * dim].to_vec()).collect()
        };
        let mut items = pick(&self.items, from_a, &mut self.rng);
        items.extend(pick(&other.items, from_b, &mut self.rng));
        Reservoir { capacity, seen: total, dim, items, rng: self.rng }
    }
}

/// Sums of an observable over consecutive fixed-length batches.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatchSeries {
    pub batch_len: u64,
    /// Sums of completed batches.
    pub sums: Vec<f64>,
    open_sum: f64,
    open_len: u64,
    /// Incomplete trailing batches of merged replicas; excluded from estimates.
    pub leftovers: Vec<(f64, u64)>,
}

impl BatchSeries {
    pub fn new(batch_len: u64) -> Self {
        BatchSeries { batch_len: batch_len.max(1), sums: Vec::new(), open_sum: 0.0, open_len: 0, leftovers: Vec::new() }
    }

    #[inline]
    fn push(&mut self, v: f64) {
        self.open_sum += v;
        self.open_len += 1;
        if self.open_len == self.batch_len {
            self.sums.push(self.open_sum);
            self.open_sum = 0.0;
            self.open_len = 0;
        }
    }

    pub fn means(&self) -> Vec<f64> {
        self.sums.iter().map(|s| s / self.batch_len as f64).collect()
    }

    fn merge(mut self, other: BatchSeries) -> Self {
        assert_eq!(self.batch_len, other.batch_len, "batch lengths must agree");
        self.sums.extend(other.sums);
        self.leftovers.extend(other.leftovers);
        for (sum, len) in [(self.open_sum, self.open_len), (other.open_sum, other.open_len)] {
            if len > 0 {
                self.leftovers.push((sum, len));
            }
        }
        self.open_sum = 0.0;
        self.open_len = 0;
        self
    }
}

/// Number of raw moments kept per coordinate.
pub const MOMENT_ORDER: usize = 8;

/// Layout of an [`ErgodicAccumulator`].
#[derive(Debug, Clone)]
pub struct AccumulatorConfig {
    pub dim: usize,
    pub observables: Vec<Observable>,
    /// Histogram ranges for each coordinate followed by `e'x`; empty for none.
    pub histogram_ranges: Vec<(f64, f64)>,
    pub bins: usize,
    pub reservoir: usize,
    /// Batch length for per-observable batch sums; `None` disables batching.
    pub batch_len: Option<u64>,
    pub seed: u64,
}

/// Default reservoir size.
pub const DEFAULT_RESERVOIR: usize = 100_000;

impl AccumulatorConfig {
    pub fn new(dim: usize, observables: Vec<Observable>) -> Self {
        AccumulatorConfig {
            dim,
            observables,
            histogram_ranges: Vec::new(),
            bins: DEFAULT_BINS,
            reservoir: 0,
            batch_len: None,
            seed: 0,
        }
    }
}

/// Mergeable running statistics of a chain.
#[derive(Debug, Clone)]
pub struct ErgodicAccumulator {
    pub dim: usize,
    pub count: u64,
    pub observables: Vec<Observable>,
    /// `obs_sums[j]` is the sum of `observables[j]`.
    pub obs_sums: Vec<f64>,
    /// Power sums `sum x_i^k`, `k = 1..=8`, per coordinate.
    pub power_sums: Vec<[f64; MOMENT_ORDER]>,
    /// One histogram per coordinate followed by one for `e'x` (or none).
    pub histograms: Vec<Histogram>,
    pub reservoir: Reservoir,
    /// One batch series per observable when batching is enabled.
    pub batches: Vec<BatchSeries>,
}

impl ErgodicAccumulator {
    /// A fresh accumulator; `stream` decorrelates the reservoir sampling of
    /// replicas sharing `config.seed`.
    pub fn new(config: &AccumulatorConfig, stream: u64) -> Result<Self> {
        for o in &config.observables {
            o.check_dim(config.dim)?;
        }
        let histograms = if config.histogram_ranges.is_empty() {
            Vec::new()
        } else {
            if config.histogram_ranges.len() != config.dim + 1 {
                return Err(Error::DimensionMismatch {
                    expected: config.dim + 1,
                    got: config.histogram_ranges.len(),
                });
            }
            config
                .histogram_ranges
                .iter()
                .map(|&(lo, hi)| Histogram::new(lo, hi, config.bins))
                .collect::<Result<_>>()?
        };
        let batches = match config.batch_len {
            Some(len) => config.observables.iter().map(|_| BatchSeries::new(len)).collect(),
            None => Vec::new(),
        };
        Ok(ErgodicAccumulator {
            dim: config.dim,
            count: 0,
            observables: config.observables.clone(),
            obs_sums: vec![0.0; config.observables.len()],
            power_sums: vec![[0.0; MOMENT_ORDER]; config.dim],
            histograms,
            reservoir: Reservoir::new(
                config.reservoir,
                config.dim,
                replica_rng(config.seed ^ 0x5EED_5EED_A5A5_0F0F, stream),
            ),
            batches,
        })
    }

    pub fn observe(&mut self, x: &[f64]) {
        self.count += 1;
        for (j, o) in self.observables.iter().enumerate() {
            let v = o.eval(x);
            self.obs_sums[j] += v;
            if let Some(b) = self.batches.get_mut(j) {
                b.push(v);
            }
        }
        for (sums, &xi) in self.power_sums.iter_mut().zip(x) {
            let mut p = 1.0;
            for s in sums.iter_mut() {
                p *= xi;
                *s += p;
            }
        }
        if !self.histograms.is_empty() {
            for (h, &xi) in self.histograms.iter_mut().zip(x) {
                h.add(xi);
            }
            self.histograms[self.dim].add(x.iter().sum());
        }
        self.reservoir.observe(x);
    }

    fn index_of(&self, h: &Observable) -> Result<usize> {
        self.observables
            .iter()
            .position(|o| o == h)
            .ok_or_else(|| Error::UntrackedObservable(h.to_string()))
    }

    /// Raw moment `E x_i^k` for `k` in `1..=8`.
    pub fn raw_moment(&self, i: usize, k: usize) -> Result<f64> {
        if self.count == 0 {
            return Err(Error::EmptyAccumulator);
        }
        assert!((1..=MOMENT_ORDER).contains(&k), "moment order out of range");
        Ok(self.power_sums[i][k - 1] / self.count as f64)
    }

    pub fn mean(&self) -> Result<Vec<f64>> {
        (0..self.dim).map(|i| self.raw_moment(i, 1)).collect()
    }

    /// Per-coordinate variance from the first two power sums.
    pub fn variance(&self) -> Result<Vec<f64>> {
        (0..self.dim)
            .map(|i| Ok(self.raw_moment(i, 2)? - self.raw_moment(i, 1)?.powi(2)))
            .collect()
    }

    pub fn batch_means(&self, h: &Observable) -> Result<Vec<f64>> {
        let j = self.index_of(h)?;
        self.batches
            .get(j)
            .map(BatchSeries::means)
            .ok_or_else(|| Error::InvalidConfig("batching disabled for this accumulator".into()))
    }
}

impl StateSink for ErgodicAccumulator {
    #[inline]
    fn observe(&mut self, x: &[f64]) {
        ErgodicAccumulator::observe(self, x)
    }
}

impl Merge for ErgodicAccumulator {
    fn merge(mut self, other: Self) -> Self {
        assert_eq!(self.dim, other.dim, "accumulators must share their dimension");
        assert_eq!(self.observables, other.observables, "accumulators must track the same observables");
        self.count += other.count;
        for (a, b) in self.obs_sums.iter_mut().zip(&other.obs_sums) {
            *a += b;
        }
        for (a, b) in self.power_sums.iter_mut().zip(&other.power_sums) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        self.histograms = self
            .histograms
            .into_iter()
            .zip(&other.histograms)
            .map(|(a, b)| a.merge(b))
            .collect();
        self.reservoir = self.reservoir.merge(other.reservoir);
        self.batches = self.batches.into_iter().zip(other.batches).map(|(a, b)| a.merge(b)).collect();
        self
    }
}

/// Time average `E_n(h) = (1/n) sum_k h(X_k)` of a tracked observable.
pub fn empirical_mean(acc: &ErgodicAccumulator, h: &Observable) -> Result<f64> {
    if acc.count == 0 {
        return Err(Error::EmptyAccumulator);
    }
    let j = acc.index_of(h)?;
    Ok(acc.obs_sums[j] / acc.count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum VarianceMethod {
    BatchMeans,
    Autocovariance,
    SteinSeries,
}

/// An asymptotic-variance estimate with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VarianceEstimate {
    pub estimate: f64,
    pub method: VarianceMethod,
    pub std_error: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batches: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lag: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub depth: Option<usize>,
}

impl VarianceEstimate {
    /// Variance of the continuous-time average over horizon `n eta`.
    pub fn continuous_time(&self, eta: f64) -> f64 {
        self.estimate * eta
    }
}

/// Result of the batch-means estimator.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatchMeans {
    pub variance: VarianceEstimate,
    pub batch_len: usize,
    pub means: Vec<f64>,
    /// `(m_j - mean(m)) / sd(m)`, for normality testing.
    pub standardized: Vec<f64>,
}

pub const MIN_BATCHES: usize = 8;

/// Batch-means estimator: `L * sampleVar(m_j)` over `B` batches of length
/// `L = floor(n / B)`; the trailing remainder is dropped.
pub fn variance_batch_means(values: &[f64], n_batches: usize) -> Result<BatchMeans> {
    if n_batches < MIN_BATCHES {
        return Err(Error::TooFewBatches { needed: MIN_BATCHES, got: n_batches });
    }
    if values.len() < n_batches {
        return Err(Error::TooFewBatches { needed: n_batches, got: values.len() });
    }
    let len = values.len() / n_batches;
    let means: Vec<f64> = values
        .chunks_exact(len)
        .take(n_batches)
        .map(|c| c.iter().sum::<f64>() / len as f64)
        .collect();
    variance_from_batch_means(&means, len)
}

/// Batch-means estimator from precomputed means of batches of length `len`
/// (e.g. pooled over replicas).
pub fn variance_from_batch_means(means: &[f64], len: usize) -> Result<BatchMeans> {
    let b = means.len();
    if b < MIN_BATCHES {
        return Err(Error::TooFewBatches { needed: MIN_BATCHES, got: b });
    }
    let grand = means.iter().sum::<f64>() / b as f64;
    let var = means.iter().map(|m| (m - grand).powi(2)).sum::<f64>() / (b - 1) as f64;
    let sd = var.sqrt();
    let standardized = means
        .iter()
        .map(|m| if sd > 0.0 { (m - grand) / sd } else { 0.0 })
        .collect();
    let estimate = len as f64 * var;
    Ok(BatchMeans {
        variance: VarianceEstimate {
            estimate,
            method: VarianceMethod::BatchMeans,
            std_error: estimate * (2.0 / (b - 1) as f64).sqrt(),
            batches: Some(b),
            lag: None,
            depth: None,
        },
        batch_len: len,
        means: means.to_vec(),
        standardized,
    })
}

/// Biased autocovariances `c_k = (1/n) sum (x_i - m)(x_{i+k} - m)`,
/// `k = 0..=max_lag`, summed over streams sharing the pooled mean `m`.
pub fn autocovariances(streams: &[&[f64]], max_lag: usize) -> Vec<f64> {
    let total: usize = streams.iter().map(|s| s.len()).sum();
    if total == 0 {
        return vec![0.0; max_lag + 1];
    }
    let mean = streams.iter().flat_map(|s| s.iter()).sum::<f64>() / total as f64;
    let mut acc = vec![0.0; max_lag + 1];
    let mut planner = FftPlanner::<f64>::new();
    for s in streams {
        let n = s.len();
        if n == 0 {
            continue;
        }
        let size = (2 * n).next_power_of_two();
        let mut buf: Vec<Complex<f64>> = s
            .iter()
            .map(|&v| Complex::new(v - mean, 0.0))
            .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
            .take(size)
            .collect();
        planner.plan_fft_forward(size).process(&mut buf);
        for z in buf.iter_mut() {
            *z = Complex::new(z.norm_sqr(), 0.0);
        }
        planner.plan_fft_inverse(size).process(&mut buf);
        for (k, a) in acc.iter_mut().enumerate().take(n.min(max_lag + 1)) {
            *a += buf[k].re / size as f64;
        }
    }
    acc.iter().map(|a| a / total as f64).collect()
}

/// Truncated autocovariance estimator `c_0 + 2 sum_{k=1}^{K*} c_k`, with
/// `K*` set by the initial positive sequence rule: pair sums
/// `c_{2m} + c_{2m+1}` are accumulated until the first negative one.
pub fn variance_autocovariance(values: &[f64], max_lag: usize) -> Result<VarianceEstimate> {
    variance_autocovariance_pooled(&[values], max_lag)
}

/// [`variance_autocovariance`] over several independent streams.
pub fn variance_autocovariance_pooled(streams: &[&[f64]], max_lag: usize) -> Result<VarianceEstimate> {
    let shortest = streams.iter().map(|s| s.len()).min().unwrap_or(0);
    let total: usize = streams.iter().map(|s| s.len()).sum();
    let limit = shortest / 10;
    if max_lag >= limit {
        return Err(Error::LagTooLarge { max_lag, limit });
    }
    let c = autocovariances(streams, max_lag);
    let mut sum = -c[0];
    let mut cut = 0;
    let mut m = 0;
    while 2 * m < c.len() {
        let pair = c[2 * m] + c.get(2 * m + 1).copied().unwrap_or(0.0);
        if pair < 0.0 {
            break;
        }
        sum += 2.0 * pair;
        cut = (2 * m + 1).min(max_lag);
        m += 1;
    }
    let estimate = sum.max(0.0);
    Ok(VarianceEstimate {
        estimate,
        method: VarianceMethod::Autocovariance,
        std_error: estimate * (2.0 * (2 * cut + 1) as f64 / total as f64).sqrt(),
        batches: None,
        lag: Some(cut),
        depth: None,
    })
}

/// Configuration of the Stein-series solver.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SteinConfig {
    pub eta: f64,
    /// Truncation depth `K` of `-sum_{k=0}^K P^k (h - mu)`.
    pub depth: usize,
    /// Independent chains per query point (per group).
    pub n_inner: usize,
    pub seed: u64,
    /// Exponential decay rate (per unit time) of correlations, if known.
    pub rate: Option<f64>,
    /// Largest acceptable geometric tail `exp(-rate * depth * eta)`.
    pub tolerance: f64,
}

impl SteinConfig {
    /// Depth `ceil(10 / (rate eta))`.
    pub fn default_depth(rate: f64, eta: f64) -> usize {
        (10.0 / (rate * eta)).ceil() as usize
    }

    fn check(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return Err(Error::InvalidConfig(format!("step size must lie in (0, 1), got {}", self.eta)));
        }
        if self.n_inner == 0 {
            return Err(Error::InvalidConfig("need at least one inner chain".into()));
        }
        if let Some(rate) = self.rate {
            let tail = (-rate * self.depth as f64 * self.eta).exp();
            if tail > self.tolerance {
                return Err(Error::DepthTooSmall { depth: self.depth, tail, tolerance: self.tolerance });
            }
        }
        Ok(())
    }
}

/// Poisson-series solution at one query point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SteinPoint {
    pub x: Vec<f64>,
    /// `f(x) = -sum_{k=0}^K (P^k h(x) - mu)` from chain group A.
    pub f: f64,
    pub f_se: f64,
    /// `P f(x) = -sum_{k=1}^{K+1} (P^k h(x) - mu)` from the independent group B.
    pub pf: f64,
    pub pf_se: f64,
    /// `(P f - f)(x) - (h(x) - mu)`; zero for an exact solution.
    pub residual: f64,
    pub residual_se: f64,
}

/// Per-chain partial sums `sum_{k=from}^{to} h(X_k)` from `x`.
fn chain_sums(
    params: &DiffusionParams,
    cfg: &SteinConfig,
    h: &Observable,
    x: &[f64],
    stream_base: u64,
    from: usize,
    to: usize,
) -> Result<Vec<f64>> {
    (0..cfg.n_inner)
        .into_par_iter()
        .map(|c| {
            let mut chain = EmChain::new(params, params, cfg.eta, x, replica_rng(cfg.seed, stream_base + c as u64));
            let mut sum = if from == 0 { h.eval(x) } else { 0.0 };
            for k in 1..=to {
                chain.step()?;
                if k >= from {
                    sum += h.eval(chain.state());
                }
            }
            Ok(sum)
        })
        .collect()
}

fn mean_and_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (m, var)
}

/// Monte Carlo solution of the discrete Poisson equation
/// `P f - f = h - mu` by its truncated series, with a residual check from
/// two independent groups of inner chains.
pub fn stein_series_solve(
    params: &DiffusionParams,
    cfg: &SteinConfig,
    h: &Observable,
    mu_hat: f64,
    points: &[Vec<f64>],
) -> Result<Vec<SteinPoint>> {
    cfg.check()?;
    h.check_dim(params.dim())?;
    let k = cfg.depth;
    let per_point = 2 * cfg.n_inner as u64;
    points
        .iter()
        .enumerate()
        .map(|(j, x)| {
            if x.len() != params.dim() {
                return Err(Error::DimensionMismatch { expected: params.dim(), got: x.len() });
            }
            let base = j as u64 * per_point;
            let a = chain_sums(params, cfg, h, x, base, 0, k)?;
            let b = chain_sums(params, cfg, h, x, base + cfg.n_inner as u64, 1, k + 1)?;
            let n = cfg.n_inner as f64;
            let (ma, va) = mean_and_var(&a);
            let (mb, vb) = mean_and_var(&b);
            let terms = (k + 1) as f64 * mu_hat;
            let f = -(ma - terms);
            let pf = -(mb - terms);
            let residual = (pf - f) - (h.eval(x) - mu_hat);
            Ok(SteinPoint {
                x: x.clone(),
                f,
                f_se: (va / n).sqrt(),
                pf,
                pf_se: (vb / n).sqrt(),
                residual,
                residual_se: (va / n + vb / n).sqrt(),
            })
        })
        .collect()
}

/// Stein-series variance `<f, f> - <P f, P f>` over stationary points.
///
/// Uses `f - P f = -(h - mu)` (exact up to the truncation tail), so each
/// point contributes `-(h(x) - mu) (f(x) + P f(x))`, with `f` and `P f`
/// taken from the same inner chains.
pub fn variance_stein(
    params: &DiffusionParams,
    cfg: &SteinConfig,
    h: &Observable,
    mu_hat: f64,
    points: &[Vec<f64>],
) -> Result<VarianceEstimate> {
    cfg.check()?;
    h.check_dim(params.dim())?;
    if points.len() < 2 {
        return Err(Error::DegenerateInput("need at least two stationary points".into()));
    }
    let k = cfg.depth;
    let n_inner = cfg.n_inner;
    let terms: Vec<f64> = points
        .par_iter()
        .enumerate()
        .map(|(j, x)| {
            let hx = h.eval(x) - mu_hat;
            let mut acc = 0.0;
            for c in 0..n_inner {
                let stream = (j * n_inner + c) as u64;
                let mut chain = EmChain::new(params, params, cfg.eta, x, replica_rng(cfg.seed, stream));
                // f + P f = -(h(x) - mu) - 2 sum_{1..=K} (h(X_k) - mu) - (h(X_{K+1}) - mu)
                let mut s = -hx;
                for step in 1..=k + 1 {
                    chain.step()?;
                    let w = if step <= k { 2.0 } else { 1.0 };
                    s -= w * (h.eval(chain.state()) - mu_hat);
                }
                acc += -hx * s;
            }
            Ok(acc / n_inner as f64)
        })
        .collect::<Result<_>>()?;
    let (mean, var) = mean_and_var(&terms);
    Ok(VarianceEstimate {
        estimate: mean.max(0.0),
        method: VarianceMethod::SteinSeries,
        std_error: (var / terms.len() as f64).sqrt(),
        batches: None,
        lag: None,
        depth: Some(k),
    })
}

/// Gaussian rate function `z^2 / (2 V)` governing moderate deviations.
pub fn mdp_rate(z: f64, variance: &VarianceEstimate) -> Result<f64> {
    if !(variance.estimate > 0.0) {
        return Err(Error::ZeroVariance);
    }
    Ok(z * z / (2.0 * variance.estimate))
}

/// Kolmogorov-Smirnov test of a sample against the standard normal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KsReport {
    pub n: usize,
    pub statistic: f64,
    pub p_value: f64,
}

pub const MIN_NORMALITY_SAMPLE: usize = 32;

/// KS statistic of `values` against `N(0, 1)` with the asymptotic
/// Kolmogorov p-value (Stephens' finite-sample correction).
pub fn clt_normality_check(values: &[f64]) -> Result<KsReport> {
    let n = values.len();
    if n < MIN_NORMALITY_SAMPLE {
        return Err(Error::TooFewBatches { needed: MIN_NORMALITY_SAMPLE, got: n });
    }
    let normal = Normal::standard();
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let nf = n as f64;
    let statistic = sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = normal.cdf(x);
            (f - i as f64 / nf).max((i + 1) as f64 / nf - f)
        })
        .fold(0.0, f64::max);
    let sqrt_n = nf.sqrt();
    let lambda = (sqrt_n + 0.12 + 0.11 / sqrt_n) * statistic;
    Ok(KsReport { n, statistic, p_value: kolmogorov_survival(lambda) })
}

/// `P(K > lambda)` for the Kolmogorov distribution.
pub fn kolmogorov_survival(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for j in 1..=100 {
        let term = (-2.0 * (j * j) as f64 * lambda * lambda).exp();
        sum += if j % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Draws `n` standard normals from a seeded generator (test calibration helper).
pub fn seeded_normals(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.sample(rand_distr::StandardNormal)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn coin_stream(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect()
    }

    fn ar1(seed: u64, n: usize, a: f64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = (1.0 - a * a).sqrt();
        let mut y = 0.0;
        (0..n)
            .map(|_| {
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                y = a * y + s * z;
                y
            })
            .collect()
    }

    #[test]
    fn observable_names_round_trip() {
        for o in [
            Observable::TanhSum,
            Observable::IndicatorPositive,
            Observable::CoordinateTanh(2),
            Observable::Sum,
            Observable::Coordinate(0),
        ] {
            assert_eq!(o.to_string().parse::<Observable>().unwrap(), o);
        }
        assert!("tanh".parse::<Observable>().is_err());
    }

    #[test]
    fn empirical_mean_trivial_cases() {
        let cfg = AccumulatorConfig::new(2, vec![Observable::Coordinate(1), Observable::IndicatorPositive]);
        let mut acc = ErgodicAccumulator::new(&cfg, 0).unwrap();
        assert_eq!(empirical_mean(&acc, &Observable::Coordinate(1)), Err(Error::EmptyAccumulator));
        acc.observe(&[0.5, -0.25]);
        assert_eq!(empirical_mean(&acc, &Observable::Coordinate(1)).unwrap(), -0.25);
        assert_eq!(empirical_mean(&acc, &Observable::IndicatorPositive).unwrap(), 1.0);
        assert!(matches!(empirical_mean(&acc, &Observable::TanhSum), Err(Error::UntrackedObservable(_))));
    }

    #[test]
    fn histogram_mass_equals_count() {
        let mut cfg = AccumulatorConfig::new(1, vec![Observable::Sum]);
        cfg.histogram_ranges = vec![(-1.0, 1.0), (-1.0, 1.0)];
        cfg.bins = 16;
        let mut acc = ErgodicAccumulator::new(&cfg, 0).unwrap();
        for v in [-5.0, -1.0, 0.0, 0.999, 1.0, 3.0] {
            acc.observe(&[v]);
        }
        for h in &acc.histograms {
            assert_eq!(h.mass(), acc.count);
            assert_eq!(h.underflow, 1);
            assert_eq!(h.overflow, 2);
        }
    }

    #[test]
    fn batch_means_constant_stream_is_zero() {
        let v = vec![0.7; 1000];
        let bm = variance_batch_means(&v, 10).unwrap();
        assert!(bm.variance.estimate < 1e-25);
    }

    #[test]
    fn batch_means_requires_batches() {
        assert!(matches!(variance_batch_means(&[1.0; 100], 4), Err(Error::TooFewBatches { .. })));
    }

    #[test]
    fn batch_means_iid_coin() {
        let v = coin_stream(1, 1_000_000);
        let bm = variance_batch_means(&v, 64).unwrap();
        assert!((bm.variance.estimate - 1.0).abs() < 0.15, "{}", bm.variance.estimate);
    }

    #[test]
    fn ar1_closed_form_three() {
        // Unit-variance AR(1): asymptotic variance (1 + a) / (1 - a) = 3 at a = 0.5.
        let v = ar1(2, 1_000_000, 0.5);
        let bm = variance_batch_means(&v, 64).unwrap().variance.estimate;
        let ac = variance_autocovariance(&v, 1_000).unwrap().estimate;
        assert!((bm / 3.0 - 1.0).abs() < 0.15, "batch means {bm}");
        assert!((ac / 3.0 - 1.0).abs() < 0.15, "autocovariance {ac}");
    }

    #[test]
    fn autocovariance_iid_reduces_to_variance() {
        let v = coin_stream(3, 1_000_000);
        let est = variance_autocovariance(&v, 100).unwrap();
        let c0 = autocovariances(&[&v], 0)[0];
        assert!((est.estimate - c0).abs() / c0 < 0.05);
    }

    #[test]
    fn autocovariance_matches_direct_sum() {
        let v = ar1(4, 500, 0.3);
        let c = autocovariances(&[&v], 5);
        let m = v.iter().sum::<f64>() / v.len() as f64;
        for (k, ck) in c.iter().enumerate() {
            let direct: f64 = (0..v.len() - k).map(|i| (v[i] - m) * (v[i + k] - m)).sum::<f64>() / v.len() as f64;
            assert_relative_eq!(*ck, direct, epsilon = 1e-12);
        }
    }

    #[test]
    fn lag_bound_enforced() {
        let v = vec![0.0; 100];
        assert!(matches!(variance_autocovariance(&v, 10), Err(Error::LagTooLarge { .. })));
    }

    #[test]
    fn mdp_rate_cases() {
        let v = VarianceEstimate {
            estimate: 1.0,
            method: VarianceMethod::BatchMeans,
            std_error: 0.0,
            batches: None,
            lag: None,
            depth: None,
        };
        assert_eq!(mdp_rate(0.0, &v).unwrap(), 0.0);
        assert_eq!(mdp_rate(1.0, &v).unwrap(), 0.5);
        assert_relative_eq!(mdp_rate(2.0, &v).unwrap(), 4.0 * mdp_rate(1.0, &v).unwrap());
        assert_eq!(mdp_rate(-1.5, &v).unwrap(), mdp_rate(1.5, &v).unwrap());
        let zero = VarianceEstimate { estimate: 0.0, ..v };
        assert_eq!(mdp_rate(1.0, &zero), Err(Error::ZeroVariance));
    }

    #[test]
    fn ks_calibration() {
        let z = seeded_normals(11, 64);
        assert!(clt_normality_check(&z).unwrap().p_value > 0.01);
        let c = vec![0.3; 64];
        assert!(clt_normality_check(&c).unwrap().p_value < 1e-6);
        assert!(matches!(clt_normality_check(&z[..10]), Err(Error::TooFewBatches { .. })));
    }

    #[test]
    fn kolmogorov_reference_points() {
        // Classical critical values: P(K > 1.358) = 0.05, P(K > 1.628) = 0.01.
        assert!((kolmogorov_survival(1.358) - 0.05).abs() < 1e-3);
        assert!((kolmogorov_survival(1.628) - 0.01).abs() < 5e-4);
    }

    #[test]
    fn stein_depth_guard() {
        let params = crate::model::derive_params(&crate::model::PhaseTypeModel::single_phase(0.5, 1.0, 1.0), false)
            .unwrap();
        let cfg = SteinConfig { eta: 0.01, depth: 10, n_inner: 4, seed: 0, rate: Some(1.0), tolerance: 1e-3 };
        let r = stein_series_solve(&params, &cfg, &Observable::TanhSum, 0.0, &[vec![0.0]]);
        assert!(matches!(r, Err(Error::DepthTooSmall { .. })));
    }

    #[test]
    fn stein_trivial_cases() {
        let params = crate::model::derive_params(&crate::model::PhaseTypeModel::single_phase(0.5, 1.0, 1.0), false)
            .unwrap();
        // K = 0: f(x) = -(h(x) - mu).
        let cfg = SteinConfig { eta: 0.01, depth: 0, n_inner: 8, seed: 1, rate: None, tolerance: 1.0 };
        let x = vec![0.4];
        let pts = stein_series_solve(&params, &cfg, &Observable::TanhSum, 0.1, &[x.clone()]).unwrap();
        assert_relative_eq!(pts[0].f, -(0.4f64.tanh() - 0.1), epsilon = 1e-15);
        assert!(pts[0].f_se < 1e-15);
    }
}
