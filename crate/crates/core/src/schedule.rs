//! Rectified-flow forward process, log-SNR and logit-normal timestep shifting.
//!
//! Everything here is computed in `f64`. Time runs from `t = 0` (data) to
//! `t = 1` (pure noise), with `z_t = (1 - t) x + t eps`.

use ndarray::{Array, Dimension};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};

/// The rectified-flow coefficients `a(t) = 1 - t`, `b(t) = t`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RFSchedule;

impl RFSchedule {
    pub fn a(&self, t: f64) -> f64 {
        1.0 - t
    }

    pub fn b(&self, t: f64) -> f64 {
        t
    }

    pub fn da(&self, _t: f64) -> f64 {
        -1.0
    }

    pub fn db(&self, _t: f64) -> f64 {
        1.0
    }

    /// `lambda_t = log(a^2 / b^2)`, see [`log_snr`].
    pub fn log_snr(&self, t: f64) -> f64 {
        log_snr(t)
    }

    /// Analytic derivative of the log-SNR: `d/dt 2 log((1-t)/t) = -2 / (t (1 - t))`.
    pub fn dlog_snr(&self, t: f64) -> f64 {
        -2.0 / (t * (1.0 - t))
    }
}

/// Logit-normal distribution over `t`, optionally parameterized by a
/// resolution shift `alpha` (in which case `mu = ln(alpha)` and `sigma = 1`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDistribution", into = "RawDistribution")]
pub struct TimestepDistribution {
    mu: f64,
    sigma: f64,
    alpha: Option<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDistribution {
    #[serde(default)]
    mu: f64,
    #[serde(default = "one")]
    sigma: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    alpha: Option<f64>,
}

fn one() -> f64 {
    1.0
}

impl TryFrom<RawDistribution> for TimestepDistribution {
    type Error = Error;

    fn try_from(raw: RawDistribution) -> Result<Self> {
        match raw.alpha {
            Some(alpha) => Self::from_alpha(alpha),
            None => Self::logit_normal(raw.mu, raw.sigma),
        }
    }
}

impl From<TimestepDistribution> for RawDistribution {
    fn from(d: TimestepDistribution) -> Self {
        RawDistribution { mu: d.mu, sigma: d.sigma, alpha: d.alpha }
    }
}

impl Default for TimestepDistribution {
    fn default() -> Self {
        Self::identity()
    }
}

impl TimestepDistribution {
    /// `mu = 0, sigma = 1`: the unshifted schedule.
    pub fn identity() -> Self {
        Self { mu: 0.0, sigma: 1.0, alpha: None }
    }

    pub fn logit_normal(mu: f64, sigma: f64) -> Result<Self> {
        if !mu.is_finite() {
            return Err(Error::Domain(format!("mu must be finite, got {mu}")));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::Domain(format!("sigma must be > 0, got {sigma}")));
        }
        Ok(Self { mu, sigma, alpha: None })
    }

    pub fn from_alpha(alpha: f64) -> Result<Self> {
        let mu = mu_from_alpha(alpha)?;
        Ok(Self { mu, sigma: 1.0, alpha: Some(alpha) })
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn alpha(&self) -> Option<f64> {
        self.alpha
    }

    /// Closed-form density `p(t)` of the logit-normal distribution on `(0, 1)`.
    pub fn pdf(&self, t: f64) -> f64 {
        if t <= 0.0 || t >= 1.0 {
            return 0.0;
        }
        let z = (logit(t) - self.mu) / self.sigma;
        (-0.5 * z * z).exp() / (self.sigma * (2.0 * std::f64::consts::PI).sqrt() * (1.0 - t) * t)
    }
}

/// A flow state built by [`interpolate`].
#[derive(Debug, Clone, PartialEq)]
pub struct FlowState<D: Dimension> {
    pub z_t: Array<f64, D>,
    pub t: f64,
    pub eps: Array<f64, D>,
}

pub fn logit(t: f64) -> f64 {
    (t / (1.0 - t)).ln()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Forward process `z_t = (1 - t) x + t eps`.
pub fn interpolate<D: Dimension>(
    x: &Array<f64, D>,
    eps: &Array<f64, D>,
    t: f64,
) -> Result<FlowState<D>> {
    if x.shape() != eps.shape() {
        return Err(Error::ShapeMismatch {
            left: x.shape().to_vec(),
            right: eps.shape().to_vec(),
        });
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("t must lie in [0, 1], got {t}")));
    }
    let sched = RFSchedule;
    let (a, b) = (sched.a(t), sched.b(t));
    let mut z_t = x.clone();
    z_t.zip_mut_with(eps, |z, &e| *z = a * *z + b * e);
    Ok(FlowState { z_t, t, eps: eps.clone() })
}

/// `lambda_t = 2 ln((1 - t) / t)`.
///
/// Endpoints return signed infinities: `+inf` at `t = 0` (all signal) and
/// `-inf` at `t = 1` (all noise). Arguments outside `[0, 1]` yield NaN.
pub fn log_snr(t: f64) -> f64 {
    if t == 0.0 {
        f64::INFINITY
    } else if t == 1.0 {
        f64::NEG_INFINITY
    } else {
        2.0 * ((1.0 - t) / t).ln()
    }
}

/// `sigma * lambda_t - 2 mu`: the log-SNR seen under a shifted distribution.
pub fn shifted_log_snr(t: f64, dist: &TimestepDistribution) -> f64 {
    dist.sigma * log_snr(t) - 2.0 * dist.mu
}

/// Maps a timestep through `t' = e^mu / (e^mu + (1/t - 1)^sigma)`.
/// Endpoints are fixed points.
pub fn shift_timestep(t: f64, dist: &TimestepDistribution) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    if t >= 1.0 {
        return 1.0;
    }
    // Work in log space: t' = sigmoid(mu + sigma * logit(t)).
    sigmoid(dist.mu + dist.sigma * logit(t))
}

pub fn mu_from_alpha(alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Domain(format!("alpha must be > 0, got {alpha}")));
    }
    Ok(alpha.ln())
}

/// Draws `n` timesteps with `logit(t) ~ N(mu, sigma)`.
///
/// Samples that round to exactly 0 or 1 in `f64` are redrawn so every value
/// lies strictly inside the unit interval.
pub fn sample_t<R: Rng + ?Sized>(dist: &TimestepDistribution, rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| sample_one_t(dist, rng)).collect()
}

pub fn sample_one_t<R: Rng + ?Sized>(dist: &TimestepDistribution, rng: &mut R) -> f64 {
    loop {
        let n: f64 = rng.sample(StandardNormal);
        let t = sigmoid(dist.mu + dist.sigma * n);
        if t > 0.0 && t < 1.0 {
            return t;
        }
    }
}

/// Mode `mu` per latent token count: an explicit `(tokens, mu)` table with
/// `default_mu` for counts it does not list.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResolutionShift {
    pub default_mu: f64,
    pub table: Vec<(usize, f64)>,
}

impl ResolutionShift {
    pub fn mu_for_tokens(&self, tokens: usize) -> f64 {
        self.table.iter().find(|(n, _)| *n == tokens).map_or(self.default_mu, |&(_, mu)| mu)
    }
}

/// Result of a binned goodness-of-fit test against the closed-form density.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChiSquareFit {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

/// Pearson chi-square test of `samples` against `dist.pdf` on `bins` equal
/// width bins of `(0, 1)`.
///
/// Expected bin masses come from Simpson quadrature of the density, so the
/// check does not reuse the sampler's transform. Adjacent bins are pooled until
/// each expected count is at least 5.
pub fn chi_square_fit(samples: &[f64], dist: &TimestepDistribution, bins: usize) -> ChiSquareFit {
    let n = samples.len() as f64;
    let mut observed = vec![0usize; bins];
    for &t in samples {
        let idx = ((t * bins as f64) as usize).min(bins - 1);
        observed[idx] += 1;
    }
    let width = 1.0 / bins as f64;
    let expected: Vec<f64> = (0..bins)
        .map(|i| simpson(|t| dist.pdf(t), i as f64 * width, (i + 1) as f64 * width, 200) * n)
        .collect();

    let mut pooled: Vec<(f64, f64)> = Vec::new();
    let (mut acc_o, mut acc_e) = (0.0, 0.0);
    for (o, e) in observed.iter().zip(&expected) {
        acc_o += *o as f64;
        acc_e += e;
        if acc_e >= 5.0 {
            pooled.push((acc_o, acc_e));
            acc_o = 0.0;
            acc_e = 0.0;
        }
    }
    if acc_e > 0.0 || acc_o > 0.0 {
        match pooled.last_mut() {
            Some(last) => {
                last.0 += acc_o;
                last.1 += acc_e;
            }
            None => pooled.push((acc_o, acc_e)),
        }
    }

    let statistic: f64 = pooled.iter().map(|(o, e)| (o - e) * (o - e) / e).sum();
    let dof = pooled.len().saturating_sub(1).max(1);
    let p_value = ChiSquared::new(dof as f64)
        .map(|c| 1.0 - c.cdf(statistic))
        .unwrap_or(f64::NAN);
    ChiSquareFit { statistic, dof, p_value }
}

fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, intervals: usize) -> f64 {
    let m = intervals + intervals % 2;
    let h = (b - a) / m as f64;
    let mut sum = f(a) + f(b);
    for i in 1..m {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        sum += w * f(a + i as f64 * h);
    }
    sum * h / 3.0
}
