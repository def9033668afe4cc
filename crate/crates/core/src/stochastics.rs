//! Duration distributions, seeded random streams and distribution fitting.
//!
//! Every random draw in the simulator goes through a [`Distribution`] sampled
//! from a [`SimRng`]. Streams are derived from a single root seed with
//! [`substream_seed`], so replica `i` and component `j` always see the same
//! numbers regardless of the order in which replicas are executed.

use std::fmt;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution as _;
use statrs::distribution::{ContinuousCDF, DiscreteCDF};
use thiserror::Error;

/// The random number generator used by every simulation stream.
pub type SimRng = ChaCha8Rng;

/// Default discretisation step for Poisson-distributed durations (1 ms).
pub const DEFAULT_POISSON_QUANTUM: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StochasticsError {
    #[error("invalid {kind} parameters: {reason}")]
    InvalidParameters { kind: &'static str, reason: String },
    #[error("fitting needs at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("sample {index} ({value}) is not a non-negative integer count")]
    NotACount { index: usize, value: f64 },
    #[error("sample {index} is not finite")]
    NonFinite { index: usize },
    #[error("all samples equal {value}; the data is degenerate, use dirac({value}) instead")]
    Degenerate { value: f64 },
    #[error("no candidate distribution fits the data: {0}")]
    NoCandidateFits(String),
}

/// SplitMix64 finaliser, used for seed derivation.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Derives the seed of substream `index` from `seed`.
///
/// The rule is `splitmix64(seed ^ splitmix64(index + 1))`: replica `i` of a
/// root seed `s` uses `substream_seed(s, i)`, and component `j` of a replica
/// seeded `r` uses `substream_seed(r, j + 1)` (stream 0 of a replica is
/// reserved for the engine's scheduling choices).
pub fn substream_seed(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(index.wrapping_add(1)))
}

pub fn rng_from_seed(seed: u64) -> SimRng {
    SimRng::seed_from_u64(seed)
}

/// Distribution families known to the simulator and the fitter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DistributionKind {
    Dirac,
    Uniform,
    Normal,
    Poisson,
    Exponential,
}

impl DistributionKind {
    pub const ALL: [DistributionKind; 5] = [
        DistributionKind::Dirac,
        DistributionKind::Uniform,
        DistributionKind::Normal,
        DistributionKind::Poisson,
        DistributionKind::Exponential,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DistributionKind::Dirac => "dirac",
            DistributionKind::Uniform => "uniform",
            DistributionKind::Normal => "normal",
            DistributionKind::Poisson => "poisson",
            DistributionKind::Exponential => "exponential",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl fmt::Display for DistributionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone)]
enum Sampler {
    Dirac(f64),
    Uniform(rand_distr::Uniform<f64>),
    Normal(rand_distr::Normal<f64>),
    Poisson(rand_distr::Poisson<f64>, f64),
    Exponential(rand_distr::Exp<f64>),
}

/// A validated duration (or count) distribution.
///
/// Parameters are in seconds. Poisson draws are counts multiplied by
/// `quantum`, so a Poisson duration with `lambda = 65` and a 1 ms quantum has
/// a mean of 65 ms; use a quantum of 1 for plain event counts.
#[derive(Debug, Clone)]
pub struct Distribution {
    params: Params,
    sampler: Sampler,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Params {
    Dirac { value: f64 },
    Uniform { low: f64, high: f64 },
    Normal { mean: f64, std_dev: f64 },
    Poisson { lambda: f64, quantum: f64 },
    Exponential { rate: f64 },
}

impl PartialEq for Distribution {
    fn eq(&self, other: &Self) -> bool {
        self.params == other.params
    }
}

fn invalid(kind: &'static str, reason: impl Into<String>) -> StochasticsError {
    StochasticsError::InvalidParameters { kind, reason: reason.into() }
}

impl Distribution {
    pub fn dirac(value: f64) -> Result<Self, StochasticsError> {
        if !value.is_finite() {
            return Err(invalid("dirac", format!("value {value} is not finite")));
        }
        Ok(Self { params: Params::Dirac { value }, sampler: Sampler::Dirac(value) })
    }

    /// Uniform on `[low, high)`.
    pub fn uniform(low: f64, high: f64) -> Result<Self, StochasticsError> {
        if !(low.is_finite() && high.is_finite() && low < high) {
            return Err(invalid("uniform", format!("need finite a < b, got a={low}, b={high}")));
        }
        let sampler = rand_distr::Uniform::new(low, high)
            .map_err(|e| invalid("uniform", e.to_string()))?;
        Ok(Self { params: Params::Uniform { low, high }, sampler: Sampler::Uniform(sampler) })
    }

    pub fn normal(mean: f64, std_dev: f64) -> Result<Self, StochasticsError> {
        if !(mean.is_finite() && std_dev.is_finite() && std_dev > 0.0) {
            return Err(invalid("normal", format!("need finite mean and sigma > 0, got mean={mean}, sigma={std_dev}")));
        }
        let sampler = rand_distr::Normal::new(mean, std_dev)
            .map_err(|e| invalid("normal", e.to_string()))?;
        Ok(Self { params: Params::Normal { mean, std_dev }, sampler: Sampler::Normal(sampler) })
    }

    pub fn poisson(lambda: f64, quantum: f64) -> Result<Self, StochasticsError> {
        if !(lambda.is_finite() && lambda > 0.0) {
            return Err(invalid("poisson", format!("need lambda > 0, got {lambda}")));
        }
        if !(quantum.is_finite() && quantum > 0.0) {
            return Err(invalid("poisson", format!("need quantum > 0, got {quantum}")));
        }
        let sampler = rand_distr::Poisson::new(lambda)
            .map_err(|e| invalid("poisson", e.to_string()))?;
        Ok(Self { params: Params::Poisson { lambda, quantum }, sampler: Sampler::Poisson(sampler, quantum) })
    }

    pub fn exponential(rate: f64) -> Result<Self, StochasticsError> {
        if !(rate.is_finite() && rate > 0.0) {
            return Err(invalid("exponential", format!("need lambda > 0, got {rate}")));
        }
        let sampler = rand_distr::Exp::new(rate).map_err(|e| invalid("exponential", e.to_string()))?;
        Ok(Self { params: Params::Exponential { rate }, sampler: Sampler::Exponential(sampler) })
    }

    /// Builds a distribution from a family name and its parameter list, in
    /// the order used by [`Distribution::parameters`].
    pub fn from_parts(kind: DistributionKind, params: &[f64]) -> Result<Self, StochasticsError> {
        let arity = |n: usize| {
            if params.len() == n {
                Ok(())
            } else {
                Err(invalid(kind_static(kind), format!("expected {n} parameters, got {}", params.len())))
            }
        };
        match kind {
            DistributionKind::Dirac => arity(1).and_then(|_| Self::dirac(params[0])),
            DistributionKind::Uniform => arity(2).and_then(|_| Self::uniform(params[0], params[1])),
            DistributionKind::Normal => arity(2).and_then(|_| Self::normal(params[0], params[1])),
            DistributionKind::Poisson => arity(2).and_then(|_| Self::poisson(params[0], params[1])),
            DistributionKind::Exponential => arity(1).and_then(|_| Self::exponential(params[0])),
        }
    }

    pub fn kind(&self) -> DistributionKind {
        match self.params {
            Params::Dirac { .. } => DistributionKind::Dirac,
            Params::Uniform { .. } => DistributionKind::Uniform,
            Params::Normal { .. } => DistributionKind::Normal,
            Params::Poisson { .. } => DistributionKind::Poisson,
            Params::Exponential { .. } => DistributionKind::Exponential,
        }
    }

    /// Parameters in declaration order: dirac `[c]`, uniform `[a, b]`,
    /// normal `[mean, sigma]`, poisson `[lambda, quantum]`, exponential `[lambda]`.
    pub fn parameters(&self) -> Vec<f64> {
        match self.params {
            Params::Dirac { value } => vec![value],
            Params::Uniform { low, high } => vec![low, high],
            Params::Normal { mean, std_dev } => vec![mean, std_dev],
            Params::Poisson { lambda, quantum } => vec![lambda, quantum],
            Params::Exponential { rate } => vec![rate],
        }
    }

    /// Mean of the unclamped distribution.
    pub fn mean(&self) -> f64 {
        match self.params {
            Params::Dirac { value } => value,
            Params::Uniform { low, high } => 0.5 * (low + high),
            Params::Normal { mean, .. } => mean,
            Params::Poisson { lambda, quantum } => lambda * quantum,
            Params::Exponential { rate } => 1.0 / rate,
        }
    }

    /// Draws a value. Negative draws (possible for Normal, Uniform or a
    /// negative Dirac) are clamped to 0 since every use is a duration.
    #[inline]
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let v = match &self.sampler {
            Sampler::Dirac(v) => *v,
            Sampler::Uniform(d) => d.sample(rng),
            Sampler::Normal(d) => d.sample(rng),
            Sampler::Poisson(d, q) => d.sample(rng) * q,
            Sampler::Exponential(d) => d.sample(rng),
        };
        v.max(0.0)
    }

    /// Probability mass on `[lo, hi)` in the units of the samples.
    fn interval_probability(&self, lo: f64, hi: f64) -> f64 {
        match self.params {
            Params::Dirac { value } => {
                if value >= lo && value < hi {
                    1.0
                } else {
                    0.0
                }
            }
            Params::Uniform { low, high } => {
                let a = lo.max(low);
                let b = hi.min(high);
                if b > a {
                    (b - a) / (high - low)
                } else {
                    0.0
                }
            }
            Params::Normal { mean, std_dev } => {
                let n = statrs::distribution::Normal::new(mean, std_dev).expect("validated");
                n.cdf(hi) - n.cdf(lo)
            }
            Params::Exponential { rate } => {
                let e = statrs::distribution::Exp::new(rate).expect("validated");
                e.cdf(hi.max(0.0)) - e.cdf(lo.max(0.0))
            }
            Params::Poisson { lambda, quantum } => {
                // integer counts k with lo <= k * quantum < hi
                let p = statrs::distribution::Poisson::new(lambda).expect("validated");
                let below = |x: f64| -> f64 {
                    // P(K * quantum < x)
                    let k = (x / quantum).ceil() - 1.0;
                    if k < 0.0 {
                        0.0
                    } else if k.is_infinite() {
                        1.0
                    } else {
                        p.cdf(k as u64)
                    }
                };
                below(hi) - below(lo)
            }
        }
    }
}

fn kind_static(kind: DistributionKind) -> &'static str {
    kind.name()
}

impl fmt::Display for Distribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.params {
            Params::Dirac { value } => write!(f, "dirac({value})"),
            Params::Uniform { low, high } => write!(f, "uniform({low}, {high})"),
            Params::Normal { mean, std_dev } => write!(f, "normal({mean}, {std_dev})"),
            Params::Poisson { lambda, quantum } => write!(f, "poisson({lambda}) x {quantum}"),
            Params::Exponential { rate } => write!(f, "exponential({rate})"),
        }
    }
}

/// Outcome of fitting one family to a sample set.
#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub distribution: Distribution,
    pub sample_count: usize,
    /// Pearson chi-square statistic over ⌈√n⌉ equal-width bins.
    pub chi_square: f64,
    pub degrees_of_freedom: usize,
}

impl FitReport {
    pub fn kind(&self) -> DistributionKind {
        self.distribution.kind()
    }

    pub fn parameters(&self) -> Vec<f64> {
        self.distribution.parameters()
    }
}

fn check_samples(samples: &[f64], needed: usize) -> Result<(), StochasticsError> {
    if samples.len() < needed {
        return Err(StochasticsError::TooFewSamples { needed, got: samples.len() });
    }
    if let Some(index) = samples.iter().position(|x| !x.is_finite()) {
        return Err(StochasticsError::NonFinite { index });
    }
    Ok(())
}

fn mean(samples: &[f64]) -> f64 {
    samples.iter().sum::<f64>() / samples.len() as f64
}

/// Maximum-likelihood Poisson fit of event counts: λ̂ is the sample mean.
pub fn fit_poisson(samples: &[f64]) -> Result<FitReport, StochasticsError> {
    fit_poisson_quantized(samples, 1.0)
}

/// Poisson fit of durations discretised by `quantum` (each sample divided by
/// `quantum` must be a non-negative integer up to 1e-6 rounding).
pub fn fit_poisson_quantized(samples: &[f64], quantum: f64) -> Result<FitReport, StochasticsError> {
    check_samples(samples, 2)?;
    let mut counts = Vec::with_capacity(samples.len());
    for (index, &x) in samples.iter().enumerate() {
        let k = x / quantum;
        let rounded = k.round();
        if x < 0.0 || (k - rounded).abs() > 1e-6 * rounded.max(1.0) {
            return Err(StochasticsError::NotACount { index, value: x });
        }
        counts.push(rounded);
    }
    let lambda = mean(&counts);
    if lambda == 0.0 {
        return Err(StochasticsError::Degenerate { value: 0.0 });
    }
    let distribution = Distribution::poisson(lambda, quantum)?;
    Ok(goodness(samples, distribution, 1))
}

/// Normal fit: sample mean and unbiased sample standard deviation.
pub fn fit_normal(samples: &[f64]) -> Result<FitReport, StochasticsError> {
    check_samples(samples, 2)?;
    let mu = mean(samples);
    let n = samples.len() as f64;
    let var = samples.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / (n - 1.0);
    let sd = var.sqrt();
    if sd == 0.0 || samples.iter().all(|&x| x == samples[0]) {
        return Err(StochasticsError::Degenerate { value: samples[0] });
    }
    let distribution = Distribution::normal(mu, sd)?;
    Ok(goodness(samples, distribution, 2))
}

pub fn fit_exponential(samples: &[f64]) -> Result<FitReport, StochasticsError> {
    check_samples(samples, 2)?;
    if let Some(index) = samples.iter().position(|&x| x < 0.0) {
        return Err(invalid("exponential", format!("sample {index} is negative")));
    }
    let mu = mean(samples);
    if mu == 0.0 {
        return Err(StochasticsError::Degenerate { value: 0.0 });
    }
    let distribution = Distribution::exponential(1.0 / mu)?;
    Ok(goodness(samples, distribution, 1))
}

pub fn fit_uniform(samples: &[f64]) -> Result<FitReport, StochasticsError> {
    check_samples(samples, 2)?;
    let (lo, hi) = min_max(samples);
    if lo == hi {
        return Err(StochasticsError::Degenerate { value: lo });
    }
    // widen the top so the maximum lies inside the half-open support
    let hi = hi + (hi - lo) * 1e-9;
    let distribution = Distribution::uniform(lo, hi)?;
    Ok(goodness(samples, distribution, 2))
}

fn min_max(samples: &[f64]) -> (f64, f64) {
    samples
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

/// Chi-square over ⌈√n⌉ equal-width bins spanning the sample range; the two
/// outer bins absorb the tails so expected probabilities sum to one.
fn goodness(samples: &[f64], distribution: Distribution, fitted_params: usize) -> FitReport {
    let n = samples.len();
    let bins = (n as f64).sqrt().ceil() as usize;
    let (lo, hi) = min_max(samples);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut observed = vec![0usize; bins];
    for &x in samples {
        let b = if hi > lo { (((x - lo) / width) as usize).min(bins - 1) } else { 0 };
        observed[b] += 1;
    }
    let mut chi_square = 0.0;
    let mut used = 0usize;
    for (b, &obs) in observed.iter().enumerate() {
        let left = if b == 0 { f64::NEG_INFINITY } else { lo + b as f64 * width };
        let right = if b + 1 == bins { f64::INFINITY } else { lo + (b + 1) as f64 * width };
        let expected = distribution.interval_probability(left, right) * n as f64;
        if expected <= 0.0 {
            if obs > 0 {
                chi_square = f64::INFINITY;
            }
            continue;
        }
        used += 1;
        let d = obs as f64 - expected;
        chi_square += d * d / expected;
    }
    FitReport {
        distribution,
        sample_count: n,
        chi_square,
        degrees_of_freedom: used.saturating_sub(1 + fitted_params),
    }
}

/// Minimum sample count accepted by [`select_fit`].
pub const SELECT_FIT_MIN_SAMPLES: usize = 30;

/// Fits every candidate family and returns the one with the smallest
/// chi-square statistic. Candidates that cannot describe the data (wrong
/// support, degenerate data, infinite statistic) are rejected.
pub fn select_fit(samples: &[f64], candidates: &[DistributionKind]) -> Result<FitReport, StochasticsError> {
    check_samples(samples, SELECT_FIT_MIN_SAMPLES)?;
    let mut best: Option<FitReport> = None;
    let mut rejected = Vec::new();
    for &kind in candidates {
        let fit = match kind {
            DistributionKind::Poisson => fit_poisson(samples),
            DistributionKind::Normal => fit_normal(samples),
            DistributionKind::Exponential => fit_exponential(samples),
            DistributionKind::Uniform => fit_uniform(samples),
            DistributionKind::Dirac => {
                if samples.iter().all(|&x| x == samples[0]) {
                    Distribution::dirac(samples[0]).map(|d| FitReport {
                        distribution: d,
                        sample_count: samples.len(),
                        chi_square: 0.0,
                        degrees_of_freedom: 0,
                    })
                } else {
                    Err(invalid("dirac", "samples are not constant"))
                }
            }
        };
        match fit {
            Ok(report) if report.chi_square.is_finite() => {
                if best.as_ref().is_none_or(|b| report.chi_square < b.chi_square) {
                    best = Some(report);
                }
            }
            Ok(report) => rejected.push(format!("{kind}: chi-square {}", report.chi_square)),
            Err(e) => rejected.push(format!("{kind}: {e}")),
        }
    }
    best.ok_or_else(|| StochasticsError::NoCandidateFits(rejected.join("; ")))
}

/// Draws `n` values; handy for synthetic round-trip checks.
pub fn draw_many<R: RngCore + ?Sized>(dist: &Distribution, n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| dist.sample(rng)).collect()
}
