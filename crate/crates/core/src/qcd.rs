//! Quickest change detection over prediction-error streams.
//!
//! A detector watches a sequence of scalar prediction errors `e_1, e_2, ...`
//! whose distribution switches from a pre-change Gaussian `f` to a
//! post-change Gaussian `g` at an unknown time, and raises a stopping time
//! as soon as a running statistic `W_n` crosses a threshold `b`:
//!
//! - CuSum (`g` fully known): `W_n = max(W_{n-1} + log L(e_n), 0)` with
//!   `b = |ln alpha|`, which bounds the false alarm rate by `alpha`.
//! - MCuSum (`g` known up to a finite candidate set of size `M`): `M`
//!   parallel CuSum recursions, stop when the max crosses `b = ln(M/alpha)`.
//! - GLRT (`g` known only through minimum parameter shifts `nu_min`,
//!   `delta_min`): maximizes the cumulative log-likelihood ratio over both
//!   the change point and the constrained post-change mean shift.
//!
//! Monte Carlo estimators for the false alarm rate and worst-case average
//! detection delay close the loop for threshold calibration.

use crate::types::Position2D;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum QcdError {
    #[error("sigma must be positive and finite, got {0}")]
    BadSigma(f64),
    #[error("calibration needs at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("calibration produced degenerate sigma = {0}")]
    DegenerateSigma(f64),
    #[error("detector already stopped at n = {0}")]
    AlreadyStopped(u64),
    #[error("MCuSum needs at least one candidate")]
    NoCandidates,
    #[error("invalid detector parameter: {0}")]
    BadParameter(String),
}

/// Univariate Gaussian given by mean and standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianSpec {
    pub mu: f64,
    pub sigma: f64,
}

impl GaussianSpec {
    pub fn new(mu: f64, sigma: f64) -> Result<Self, QcdError> {
        if !(sigma > 0.0) || !sigma.is_finite() || !mu.is_finite() {
            return Err(QcdError::BadSigma(sigma));
        }
        Ok(Self { mu, sigma })
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        Normal::new(self.mu, self.sigma)
            .expect("valid spec")
            .sample(rng)
    }
}

/// One scored step of a prediction-error stream. `n` is the collection
/// sample index at which the truth was revealed; `e` is a norm, hence >= 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorSample {
    pub n: u64,
    pub e: f64,
}

/// Euclidean prediction error between a revealed position and the
/// predicted mean, both expressed in the same frame instance.
pub fn prediction_error(z: Position2D, mu: Position2D) -> f64 {
    z.distance(&mu)
}

/// Log likelihood ratio `ln(g(e)/f(e))` for the two Gaussian hypotheses:
/// `(e-mu0)^2/(2 sigma0^2) - (e-mu1)^2/(2 sigma1^2) + ln(sigma0/sigma1)`.
pub fn log_lr(e: f64, f: &GaussianSpec, g: &GaussianSpec) -> f64 {
    let d0 = e - f.mu;
    let d1 = e - g.mu;
    d0 * d0 / (2.0 * f.sigma * f.sigma) - d1 * d1 / (2.0 * g.sigma * g.sigma)
        + (f.sigma / g.sigma).ln()
}

/// Kullback-Leibler divergence `D(f || g)` between two Gaussians:
/// `ln(sigma_g/sigma_f) + (sigma_f^2 + (mu_f-mu_g)^2) / (2 sigma_g^2) - 1/2`.
pub fn kl_gaussian(f: &GaussianSpec, g: &GaussianSpec) -> f64 {
    let dm = f.mu - g.mu;
    (g.sigma / f.sigma).ln() + (f.sigma * f.sigma + dm * dm) / (2.0 * g.sigma * g.sigma) - 0.5
}

/// CuSum / GLRT threshold meeting a false alarm budget: `|ln alpha|`.
pub fn cusum_threshold(alpha: f64) -> f64 {
    alpha.ln().abs()
}

/// MCuSum threshold for `m` candidates: `ln(m / alpha)`.
pub fn mcusum_threshold(alpha: f64, m: usize) -> f64 {
    (m as f64 / alpha).ln()
}

/// Which statistic a detector runs, with its distributional knowledge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DetectorSpec {
    CuSum {
        f: GaussianSpec,
        g: GaussianSpec,
    },
    MCuSum {
        f: GaussianSpec,
        candidates: Vec<GaussianSpec>,
    },
    Glrt {
        f: GaussianSpec,
        /// Minimum post-change mean shift, `mu1 - mu0 >= nu_min > 0`.
        nu_min: f64,
        /// Minimum post-change sigma shift, `sigma1 - sigma0 >= delta_min > 0`.
        delta_min: f64,
        /// Change-point lookback cap; bounds per-step cost at O(lookback).
        lookback: usize,
    },
}

impl DetectorSpec {
    pub fn pre_change(&self) -> &GaussianSpec {
        match self {
            DetectorSpec::CuSum { f, .. }
            | DetectorSpec::MCuSum { f, .. }
            | DetectorSpec::Glrt { f, .. } => f,
        }
    }

    fn validate(&self) -> Result<(), QcdError> {
        match self {
            DetectorSpec::CuSum { .. } => Ok(()),
            DetectorSpec::MCuSum { candidates, .. } => {
                if candidates.is_empty() {
                    Err(QcdError::NoCandidates)
                } else {
                    Ok(())
                }
            }
            DetectorSpec::Glrt {
                nu_min,
                delta_min,
                lookback,
                ..
            } => {
                if !(*nu_min > 0.0) || !(*delta_min > 0.0) {
                    Err(QcdError::BadParameter(format!(
                        "GLRT shifts must be positive, got nu_min={nu_min}, delta_min={delta_min}"
                    )))
                } else if *lookback == 0 {
                    Err(QcdError::BadParameter("GLRT lookback must be >= 1".into()))
                } else {
                    Ok(())
                }
            }
        }
    }

    /// Canonical threshold for this statistic at false alarm budget `alpha`.
    pub fn default_threshold(&self, alpha: f64) -> f64 {
        match self {
            DetectorSpec::CuSum { .. } | DetectorSpec::Glrt { .. } => cusum_threshold(alpha),
            DetectorSpec::MCuSum { candidates, .. } => mcusum_threshold(alpha, candidates.len()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub spec: DetectorSpec,
    pub alpha: f64,
    pub b: f64,
}

impl DetectorConfig {
    /// Threshold derived from `alpha` by the statistic's canonical rule.
    pub fn new(spec: DetectorSpec, alpha: f64) -> Result<Self, QcdError> {
        spec.validate()?;
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(QcdError::BadParameter(format!("alpha must be in (0,1), got {alpha}")));
        }
        let b = spec.default_threshold(alpha);
        Ok(Self { spec, alpha, b })
    }

    /// Same as [`new`](Self::new) but with an explicit threshold override.
    pub fn with_threshold(spec: DetectorSpec, alpha: f64, b: f64) -> Result<Self, QcdError> {
        let mut cfg = Self::new(spec, alpha)?;
        if !(b > 0.0) || !b.is_finite() {
            return Err(QcdError::BadParameter(format!("threshold must be positive, got {b}")));
        }
        cfg.b = b;
        Ok(cfg)
    }
}

#[derive(Debug, Clone)]
enum StatState {
    CuSum(f64),
    MCuSum(Vec<f64>),
    Glrt(VecDeque<f64>),
}

/// Sequential detector: owns the running statistic(s), the sample counter,
/// and the stopping status. Once `stopped_at` is set it never changes.
#[derive(Debug, Clone)]
pub struct Detector {
    config: DetectorConfig,
    state: StatState,
    n: u64,
    statistic: f64,
    stopped_at: Option<u64>,
}

impl Detector {
    pub fn new(config: DetectorConfig) -> Self {
        let state = match &config.spec {
            DetectorSpec::CuSum { .. } => StatState::CuSum(0.0),
            DetectorSpec::MCuSum { candidates, .. } => {
                StatState::MCuSum(vec![0.0; candidates.len()])
            }
            DetectorSpec::Glrt { .. } => StatState::Glrt(VecDeque::new()),
        };
        Self {
            config,
            state,
            n: 0,
            statistic: 0.0,
            stopped_at: None,
        }
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    /// Samples consumed so far.
    pub fn n(&self) -> u64 {
        self.n
    }

    /// Current decision statistic (the max over components for MCuSum).
    pub fn statistic(&self) -> f64 {
        self.statistic
    }

    pub fn stopped_at(&self) -> Option<u64> {
        self.stopped_at
    }

    /// Consumes the next error sample. Returns `Some(tau)` exactly once, at
    /// the step where the statistic first reaches the threshold.
    pub fn step(&mut self, e: f64) -> Result<Option<u64>, QcdError> {
        if let Some(tau) = self.stopped_at {
            return Err(QcdError::AlreadyStopped(tau));
        }
        self.n += 1;
        let w = match (&mut self.state, &self.config.spec) {
            (StatState::CuSum(w), DetectorSpec::CuSum { f, g }) => {
                *w = (*w + log_lr(e, f, g)).max(0.0);
                *w
            }
            (StatState::MCuSum(ws), DetectorSpec::MCuSum { f, candidates }) => {
                let mut best = f64::NEG_INFINITY;
                for (w, g) in ws.iter_mut().zip(candidates) {
                    *w = (*w + log_lr(e, f, g)).max(0.0);
                    best = best.max(*w);
                }
                best
            }
            (
                StatState::Glrt(buffer),
                DetectorSpec::Glrt {
                    f,
                    nu_min,
                    delta_min,
                    lookback,
                },
            ) => {
                buffer.push_back(e);
                if buffer.len() > *lookback {
                    buffer.pop_front();
                }
                glrt_statistic(buffer, f, *nu_min, *delta_min)
            }
            _ => unreachable!("state matches spec by construction"),
        };
        self.statistic = w;
        if w >= self.config.b {
            self.stopped_at = Some(self.n);
            Ok(Some(self.n))
        } else {
            Ok(None)
        }
    }
}

/// GLRT statistic over the buffered tail: maximizes, over every candidate
/// change point `k` in the buffer,
/// `sum_{i=k}^{n} [ nu_k (e_i - mu0)/sigma0^2 - nu_k^2/(2 sigma0^2)
///                  + ln(sigma0/(sigma0 + delta_min)) ]`
/// with the constrained mean-shift estimate
/// `nu_k = max(mean_{i=k..n} |e_i - mu0| - nu_min, 0) + nu_min`.
fn glrt_statistic(buffer: &VecDeque<f64>, f: &GaussianSpec, nu_min: f64, delta_min: f64) -> f64 {
    let sigma0_sq = f.sigma * f.sigma;
    let ln_sigma_term = (f.sigma / (f.sigma + delta_min)).ln();
    let mut sum_dev = 0.0;
    let mut sum_abs = 0.0;
    let mut best = f64::NEG_INFINITY;
    // Walk candidate change points from newest to oldest, extending the
    // suffix sums one sample at a time.
    for (m, e) in buffer.iter().rev().enumerate() {
        let dev = e - f.mu;
        sum_dev += dev;
        sum_abs += dev.abs();
        let len = (m + 1) as f64;
        let nu_hat = (sum_abs / len - nu_min).max(0.0) + nu_min;
        let w = nu_hat * sum_dev / sigma0_sq - len * nu_hat * nu_hat / (2.0 * sigma0_sq)
            + len * ln_sigma_term;
        best = best.max(w);
    }
    best
}

/// Runs a detector over a whole error sequence. Returns the stopping time
/// (1-based index into the sequence) and the statistic trace, one entry per
/// consumed sample. Samples after the stop are not consumed, so the trace
/// ends at `tau` when a stop occurs.
pub fn detect_stream(
    errors: impl IntoIterator<Item = f64>,
    config: &DetectorConfig,
) -> (Option<u64>, Vec<f64>) {
    let mut detector = Detector::new(config.clone());
    let mut trace = Vec::new();
    for e in errors {
        let stopped = detector.step(e).expect("fresh detector");
        trace.push(detector.statistic());
        if stopped.is_some() {
            break;
        }
    }
    (detector.stopped_at(), trace)
}

/// Sample mean and sample standard deviation (denominator `n - 1`) of an
/// error stream, as a Gaussian spec. Rejects degenerate streams.
pub fn calibrate(errors: &[f64]) -> Result<GaussianSpec, QcdError> {
    if errors.len() < 2 {
        return Err(QcdError::TooFewSamples(errors.len()));
    }
    let n = errors.len() as f64;
    let mean = errors.iter().sum::<f64>() / n;
    let ss = errors.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>();
    let sigma = (ss / (n - 1.0)).sqrt();
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(QcdError::DegenerateSigma(sigma));
    }
    GaussianSpec::new(mean, sigma)
}

/// Monte Carlo false-alarm-rate estimate `1 / mean(tau)` over pure
/// pre-change streams. Censored runs are counted at `max_len`, so
/// `mean_tau` is a lower bound on the no-change mean run length and `far`
/// is a conservative (upper) estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FarEstimate {
    pub far: f64,
    pub mean_tau: f64,
    pub censored: usize,
    pub runs: usize,
}

pub fn estimate_far(config: &DetectorConfig, n_runs: usize, max_len: usize, seed: u64) -> FarEstimate {
    assert!(n_runs >= 1, "need at least one run");
    let f = *config.spec.pre_change();
    let mut total = 0u64;
    let mut censored = 0usize;
    for run in 0..n_runs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(run as u64));
        let mut detector = Detector::new(config.clone());
        let mut tau = max_len as u64;
        for _ in 0..max_len {
            if detector.step(f.sample(&mut rng)).expect("running").is_some() {
                tau = detector.n();
                break;
            }
        }
        if detector.stopped_at().is_none() {
            censored += 1;
        }
        total += tau;
    }
    let mean_tau = total as f64 / n_runs as f64;
    FarEstimate {
        far: 1.0 / mean_tau,
        mean_tau,
        censored,
        runs: n_runs,
    }
}

/// Average detection delay at a fixed change point: mean of `(tau - gamma)+`
/// over the runs that stop. Streams draw from `f` before `gamma` and from
/// `g_true` from `gamma` on (1-based sample indices).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AddEstimate {
    pub add: f64,
    pub stopped: usize,
    pub runs: usize,
}

pub fn estimate_add(
    config: &DetectorConfig,
    g_true: &GaussianSpec,
    gamma: u64,
    n_runs: usize,
    max_len: usize,
    seed: u64,
) -> AddEstimate {
    assert!(n_runs >= 1, "need at least one run");
    let f = *config.spec.pre_change();
    let mut delays = 0.0;
    let mut stopped = 0usize;
    for run in 0..n_runs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(run as u64));
        let mut detector = Detector::new(config.clone());
        for n in 1..=max_len as u64 {
            let spec = if n < gamma { &f } else { g_true };
            if detector.step(spec.sample(&mut rng)).expect("running").is_some() {
                delays += (detector.n().saturating_sub(gamma)) as f64;
                stopped += 1;
                break;
            }
        }
    }
    AddEstimate {
        add: if stopped > 0 { delays / stopped as f64 } else { f64::NAN },
        stopped,
        runs: n_runs,
    }
}

/// Empirical surrogate of the worst-case average detection delay: the max
/// over a change-point grid of the per-gamma mean delay among stopped runs.
/// The essential-sup conditioning of the exact definition is not Monte
/// Carlo-estimable; the worst-gamma mean is the documented approximation.
#[derive(Debug, Clone, PartialEq)]
pub struct WaddEstimate {
    pub wadd: f64,
    pub per_gamma: Vec<(u64, AddEstimate)>,
}

pub fn estimate_wadd(
    config: &DetectorConfig,
    g_true: &GaussianSpec,
    gamma_grid: &[u64],
    n_runs: usize,
    max_len: usize,
    seed: u64,
) -> WaddEstimate {
    assert!(!gamma_grid.is_empty(), "gamma grid must be non-empty");
    let mut per_gamma = Vec::with_capacity(gamma_grid.len());
    let mut wadd = f64::NEG_INFINITY;
    for (i, &gamma) in gamma_grid.iter().enumerate() {
        let est = estimate_add(
            config,
            g_true,
            gamma,
            n_runs,
            max_len,
            seed.wrapping_add((i as u64) << 32),
        );
        if est.add.is_finite() {
            wadd = wadd.max(est.add);
        }
        per_gamma.push((gamma, est));
    }
    WaddEstimate { wadd, per_gamma }
}
